//! The adaptation network: dense-block feature extractor with transition
//! taps, global pooling, and a residual source/target classifier pair.
//!
//! One forward pass of a combined source+target batch produces `n_MMD`
//! tap features (one per transition plus the source logits at the end),
//! source-classifier logits `f_s`, and target-classifier probabilities
//! `f_t = softmax(f_s + delta)` where `delta` is a small zero-initialized
//! residual perceptron. Source and target samples traverse identical
//! parameters; batch-norm statistics are shared over the combined batch.

use crate::autodiff::{BnState, Mode, ParamId, ParamSet, Tape, Var};
use crate::error::{MagnetError, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Transition flavor, uniform across a network.
///
/// Type A taps compact fully connected features (texture-oriented); type B
/// taps response-gated convolutional maps that keep spatial structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionType {
    A,
    B,
}

/// Architecture description; the parameter layout is a pure function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub stem_channels: usize,
    pub transition_type: TransitionType,
    pub transition_compression: f64,
    pub tap_fc_dim: usize,
    pub residual_hidden: usize,
}

impl NetworkConfig {
    /// Defaults for a desk-scale network on `size`-pixel inputs.
    pub fn new(input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        NetworkConfig {
            input_channels,
            input_size,
            num_classes,
            num_blocks: 3,
            layers_per_block: 3,
            growth_rate: 8,
            stem_channels: 16,
            transition_type: TransitionType::A,
            transition_compression: 0.5,
            tap_fc_dim: 64,
            residual_hidden: 2 * num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MagnetError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_blocks < 1
            || self.layers_per_block < 1
            || self.growth_rate < 1
            || self.stem_channels < 1
            || self.tap_fc_dim < 1
            || self.residual_hidden < 1
            || self.input_channels < 1
        {
            return Err(MagnetError::Config(
                "all architectural extents must be >= 1".into(),
            ));
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(MagnetError::Config(format!(
                "transition_compression must lie in (0, 1], got {}",
                self.transition_compression
            )));
        }
        let mut s = self.input_size;
        for b in 0..self.num_blocks {
            if s % 2 != 0 {
                return Err(MagnetError::Config(format!(
                    "odd spatial extent {s} entering transition {b}; \
                     input_size {} does not support {} halvings",
                    self.input_size, self.num_blocks
                )));
            }
            s /= 2;
        }
        Ok(())
    }

    /// One MMD tap per transition, plus one at the classifier.
    pub fn tap_count(&self) -> usize {
        self.num_blocks + 1
    }

    fn compress(&self, channels: usize) -> usize {
        (self.transition_compression * channels as f64).ceil() as usize
    }

    /// Channel pairs `(block output, post-transition)` for each stage.
    pub fn channel_plan(&self) -> Vec<(usize, usize)> {
        let mut plan = Vec::with_capacity(self.num_blocks);
        let mut c = self.stem_channels;
        for _ in 0..self.num_blocks {
            let block_out = c + self.layers_per_block * self.growth_rate;
            let compressed = self.compress(block_out);
            plan.push((block_out, compressed));
            c = compressed;
        }
        plan
    }

    /// Channels entering the global average pool.
    pub fn final_channels(&self) -> usize {
        self.channel_plan().last().expect("at least one block").1
    }

    /// Feature dimension of each MMD tap, in forward order.
    pub fn tap_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.tap_count());
        let mut spatial = self.input_size;
        for (_, compressed) in self.channel_plan() {
            spatial /= 2;
            dims.push(match self.transition_type {
                TransitionType::A => self.tap_fc_dim,
                TransitionType::B => compressed * spatial * spatial,
            });
        }
        dims.push(self.num_classes);
        dims
    }
}

// ---- parameter handles ----------------------------------------------------

#[derive(Clone)]
struct Conv {
    w: ParamId,
}

#[derive(Clone)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("consistent shape")
}

fn new_conv(
    params: &mut ParamSet,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut SplitMix64,
) -> Result<Conv> {
    let w = params.register(
        &format!("{name}.weight"),
        he_tensor(&[out_c, in_c, k, k], in_c * k * k, rng),
    )?;
    Ok(Conv { w })
}

fn new_bn(
    params: &mut ParamSet,
    states: &mut Vec<BnState>,
    name: &str,
    channels: usize,
) -> Result<Bn> {
    let gamma = params.register(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
    let beta = params.register(&format!("{name}.beta"), Tensor::zeros(&[channels]))?;
    states.push(BnState::new(channels));
    Ok(Bn {
        gamma,
        beta,
        state: states.len() - 1,
    })
}

/// Residual-head parameters step at a tenth of the base learning rate, so
/// the perturbation stays a correction: the shared head keeps absorbing the
/// supervised signal, and the entropy term cannot rotate the bridge faster
/// than supervision restores it.
const RESIDUAL_LR_MULTIPLIER: f64 = 0.1;

fn new_linear(
    params: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
    rng: &mut SplitMix64,
) -> Result<Linear> {
    let lr_mult = if name.starts_with("head.residual") {
        RESIDUAL_LR_MULTIPLIER
    } else {
        1.0
    };
    let w = if zero_init {
        Tensor::zeros(&[in_dim, out_dim])
    } else {
        he_tensor(&[in_dim, out_dim], in_dim, rng)
    };
    let w = params.register_with_lr(&format!("{name}.weight"), w, lr_mult)?;
    let b = params.register_with_lr(
        &format!("{name}.bias"),
        Tensor::zeros(&[out_dim]),
        lr_mult,
    )?;
    Ok(Linear { w, b })
}

fn bn_relu(
    tape: &mut Tape,
    params: &ParamSet,
    states: &mut [BnState],
    bn: &Bn,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let gamma = tape.param(params, bn.gamma);
    let beta = tape.param(params, bn.beta);
    let y = tape.batchnorm2d(x, gamma, beta, &mut states[bn.state], mode)?;
    Ok(tape.relu(y))
}

fn linear_forward(tape: &mut Tape, params: &ParamSet, lin: &Linear, x: Var) -> Result<Var> {
    let w = tape.param(params, lin.w);
    let b = tape.param(params, lin.b);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

// ---- layers ----------------------------------------------------------------

/// One composite dense layer: BN-ReLU-Conv1x1 (to `4k`) then
/// BN-ReLU-Conv3x3 (to `k`, padding 1). Spatial size is preserved.
#[derive(Clone)]
pub(crate) struct DenseLayer {
    bn1: Bn,
    conv1: Conv,
    bn2: Bn,
    conv2: Conv,
}

impl DenseLayer {
    pub(crate) fn new(
        params: &mut ParamSet,
        states: &mut Vec<BnState>,
        prefix: &str,
        in_channels: usize,
        growth: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let bottleneck = 4 * growth;
        Ok(DenseLayer {
            bn1: new_bn(params, states, &format!("{prefix}.bn1"), in_channels)?,
            conv1: new_conv(
                params,
                &format!("{prefix}.conv1"),
                bottleneck,
                in_channels,
                1,
                rng,
            )?,
            bn2: new_bn(params, states, &format!("{prefix}.bn2"), bottleneck)?,
            conv2: new_conv(params, &format!("{prefix}.conv2"), growth, bottleneck, 3, rng)?,
        })
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        states: &mut [BnState],
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let h = bn_relu(tape, params, states, &self.bn1, x, mode)?;
        let w1 = tape.param(params, self.conv1.w);
        let h = tape.conv2d(h, w1, 1, 0)?;
        let h = bn_relu(tape, params, states, &self.bn2, h, mode)?;
        let w2 = tape.param(params, self.conv2.w);
        tape.conv2d(h, w2, 1, 1)
    }
}

/// Dense block: layer `i` consumes the concatenation of the block input and
/// all previous layer outputs; the block output concatenates everything.
#[derive(Clone)]
pub(crate) struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub(crate) fn new(
        params: &mut ParamSet,
        states: &mut Vec<BnState>,
        prefix: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push(DenseLayer::new(
                params,
                states,
                &format!("{prefix}.layer{i}"),
                in_channels + i * growth,
                growth,
                rng,
            )?);
        }
        Ok(DenseBlock { layers: ls })
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        states: &mut [BnState],
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = if features.len() == 1 {
                features[0]
            } else {
                tape.concat_channels(&features)?
            };
            features.push(layer.forward(tape, params, states, input, mode)?);
        }
        tape.concat_channels(&features)
    }
}

/// Transition between blocks: compresses channels, halves the spatial size,
/// and produces the MMD tap feature for this depth.
#[derive(Clone)]
pub(crate) struct Transition {
    kind: TransitionType,
    bn: Bn,
    conv: Conv,
    // Type A only: the two projections whose elementwise sum is the tap.
    tap_fc1: Option<Linear>,
    tap_fc2: Option<Linear>,
}

impl Transition {
    pub(crate) fn new(
        params: &mut ParamSet,
        states: &mut Vec<BnState>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kind: TransitionType,
        tap_fc_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let bn = new_bn(params, states, &format!("{prefix}.bn"), in_channels)?;
        let conv = new_conv(
            params,
            &format!("{prefix}.conv"),
            out_channels,
            in_channels,
            1,
            rng,
        )?;
        let (tap_fc1, tap_fc2) = match kind {
            TransitionType::A => (
                Some(new_linear(
                    params,
                    &format!("{prefix}.tap_fc1"),
                    out_channels,
                    tap_fc_dim,
                    false,
                    rng,
                )?),
                Some(new_linear(
                    params,
                    &format!("{prefix}.tap_fc2"),
                    out_channels,
                    tap_fc_dim,
                    false,
                    rng,
                )?),
            ),
            TransitionType::B => (None, None),
        };
        Ok(Transition {
            kind,
            bn,
            conv,
            tap_fc1,
            tap_fc2,
        })
    }

    /// Returns `(downsampled, tap)`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        states: &mut [BnState],
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(MagnetError::Config(format!(
                "odd spatial extent {h}x{w} entering a transition"
            )));
        }
        let a = bn_relu(tape, params, states, &self.bn, x, mode)?;
        let wc = tape.param(params, self.conv.w);
        let bottleneck = tape.conv2d(a, wc, 1, 0)?;
        match self.kind {
            TransitionType::A => {
                let down = tape.avg_pool2d(bottleneck, 2, 2)?;
                let pooled = tape.global_avg_pool(bottleneck)?;
                let p1 = linear_forward(tape, params, self.tap_fc1.as_ref().unwrap(), pooled)?;
                let p2 = linear_forward(tape, params, self.tap_fc2.as_ref().unwrap(), pooled)?;
                let tap = tape.add(p1, p2)?;
                Ok((down, tap))
            }
            TransitionType::B => {
                let down = tape.avg_pool2d(bottleneck, 2, 2)?;
                let gated = tape.gate_below_median(down)?;
                let s = tape.value(gated).shape().to_vec();
                let tap = tape.reshape(gated, vec![s[0], s[1] * s[2] * s[3]])?;
                Ok((gated, tap))
            }
        }
    }
}

// ---- the full model ---------------------------------------------------------

/// Outputs of one forward pass.
///
/// The MMD sites are the transition taps plus one at the classifier; the
/// classifier site compares `f_s` logits on the source half against `f_t`
/// logits on the target half, so both logit vars are exposed.
pub struct ForwardOutput {
    /// One tap feature per transition (`num_blocks` entries).
    pub transition_taps: Vec<Var>,
    /// Globally pooled trunk features feeding the classifiers.
    pub pooled: Var,
    pub fs_logits: Var,
    pub ft_logits: Var,
    pub ft_probs: Var,
}

/// The full parameterized network.
pub struct MagnetModel {
    config: NetworkConfig,
    params: ParamSet,
    bn_states: Vec<BnState>,
    stem: Conv,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    shared_head: Linear,
    res_fc1: Linear,
    res_fc2: Linear,
}

impl MagnetModel {
    /// Build and initialize a model. Convolution and fully connected weights
    /// get He-style normal initialization (`std = sqrt(2 / fan_in)`); the
    /// residual output layer starts at zero so `f_t = f_s` at iteration 0.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, 0xA0DE1);
        let mut params = ParamSet::new();
        let mut states = Vec::new();

        let stem = new_conv(
            &mut params,
            "stem.conv",
            config.stem_channels,
            config.input_channels,
            3,
            &mut rng,
        )?;

        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut transitions = Vec::with_capacity(config.num_blocks);
        let mut channels = config.stem_channels;
        for b in 0..config.num_blocks {
            blocks.push(DenseBlock::new(
                &mut params,
                &mut states,
                &format!("block{b}"),
                channels,
                config.layers_per_block,
                config.growth_rate,
                &mut rng,
            )?);
            let block_out = channels + config.layers_per_block * config.growth_rate;
            let compressed = config.compress(block_out);
            transitions.push(Transition::new(
                &mut params,
                &mut states,
                &format!("transition{b}"),
                block_out,
                compressed,
                config.transition_type,
                config.tap_fc_dim,
                &mut rng,
            )?);
            channels = compressed;
        }

        let source_head = new_linear(
            &mut params,
            "head.classifier",
            channels,
            config.num_classes,
            false,
            &mut rng,
        )?;
        let res_fc1 = new_linear(
            &mut params,
            "head.residual_fc1",
            config.num_classes,
            config.residual_hidden,
            false,
            &mut rng,
        )?;
        let res_fc2 = new_linear(
            &mut params,
            "head.residual_fc2",
            config.residual_hidden,
            config.num_classes,
            true,
            &mut rng,
        )?;

        Ok(MagnetModel {
            config,
            params,
            bn_states: states,
            stem,
            blocks,
            transitions,
            shared_head: source_head,
            res_fc1,
            res_fc2,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn bn_states(&self) -> &[BnState] {
        &self.bn_states
    }

    pub(crate) fn bn_states_mut(&mut self) -> &mut Vec<BnState> {
        &mut self.bn_states
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Run the network on a batch.
    ///
    /// In train mode, source and target sub-batches are expected to be
    /// concatenated along dim 0; they traverse identical parameters and
    /// shared batch-norm statistics.
    pub fn forward(&mut self, tape: &mut Tape, batch: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != self.config.input_channels
            || shape[2] != self.config.input_size
            || shape[3] != self.config.input_size
        {
            return Err(MagnetError::Dimension(format!(
                "batch shape {shape:?} does not match configured input {}x{}x{}",
                self.config.input_channels, self.config.input_size, self.config.input_size
            )));
        }
        let MagnetModel {
            params,
            bn_states,
            stem,
            blocks,
            transitions,
            shared_head,
            res_fc1,
            res_fc2,
            ..
        } = self;

        let x = tape.input(batch.clone());
        let sw = tape.param(params, stem.w);
        let mut cur = tape.conv2d(x, sw, 1, 1)?;

        let mut taps = Vec::with_capacity(blocks.len() + 1);
        for (block, transition) in blocks.iter().zip(transitions.iter()) {
            cur = block.forward(tape, params, bn_states, cur, mode)?;
            let (down, tap) = transition.forward(tape, params, bn_states, cur, mode)?;
            cur = down;
            taps.push(tap);
        }

        let pooled = tape.global_avg_pool(cur)?;
        // Residual classifier bridge: f_t = f_s + delta, with the residual
        // stepping at a reduced learning rate so the perturbation stays a
        // small correction on top of the supervised source classifier.
        let fs_logits = linear_forward(tape, params, shared_head, pooled)?;
        let h = linear_forward(tape, params, res_fc1, fs_logits)?;
        let h = tape.relu(h);
        let delta = linear_forward(tape, params, res_fc2, h)?;
        let ft_logits = tape.add(fs_logits, delta)?;
        let ft_probs = tape.softmax(ft_logits)?;

        Ok(ForwardOutput {
            transition_taps: taps,
            pooled,
            fs_logits,
            ft_logits,
            ft_probs,
        })
    }
}

/// Drive individual layers outside a full model. The gradient-check command
/// uses these to exercise each layer's backward path in isolation.
pub mod test_support {
    use super::*;

    #[derive(Clone)]
    pub struct StandaloneDenseLayer(DenseLayer);

    #[derive(Clone)]
    pub struct StandaloneTransition(Transition);

    pub fn standalone_dense_layer(
        seed: u64,
        in_channels: usize,
        growth: usize,
    ) -> Result<(ParamSet, Vec<BnState>, StandaloneDenseLayer)> {
        let mut rng = SplitMix64::stream(seed, 0xD15E);
        let mut params = ParamSet::new();
        let mut states = Vec::new();
        let layer = DenseLayer::new(&mut params, &mut states, "layer", in_channels, growth, &mut rng)?;
        Ok((params, states, StandaloneDenseLayer(layer)))
    }

    pub fn dense_layer_forward(
        layer: &StandaloneDenseLayer,
        tape: &mut Tape,
        params: &ParamSet,
        states: &mut [BnState],
        x: Var,
    ) -> Result<Var> {
        layer.0.forward(tape, params, states, x, Mode::Train)
    }

    pub fn standalone_transition(
        seed: u64,
        in_channels: usize,
        out_channels: usize,
        kind: TransitionType,
    ) -> Result<(ParamSet, Vec<BnState>, StandaloneTransition)> {
        let mut rng = SplitMix64::stream(seed, 0x7A34);
        let mut params = ParamSet::new();
        let mut states = Vec::new();
        let transition = Transition::new(
            &mut params,
            &mut states,
            "transition",
            in_channels,
            out_channels,
            kind,
            8,
            &mut rng,
        )?;
        Ok((params, states, StandaloneTransition(transition)))
    }

    pub fn transition_forward(
        transition: &StandaloneTransition,
        tape: &mut Tape,
        params: &ParamSet,
        states: &mut [BnState],
        x: Var,
    ) -> Result<(Var, Var)> {
        transition.0.forward(tape, params, states, x, Mode::Train)
    }
}

#[cfg(test)]
mod tests;
