//! Adversarial pairwise reverse attention.
//!
//! A feature map `F` is gated twice. Channel attention `M_c` comes from a
//! shared two-layer MLP over average- and max-pooled channel descriptors;
//! spatial attention `M_s` comes from a `k x k` convolution over the channel
//! pools of `F * M_c`. The person branch keeps what the maps select and the
//! camera branch keeps what their complements select:
//!
//! ```text
//! person = relu((F * M_c) * M_s + F)
//! camera = relu((F * (1 - M_c)) * (1 - M_s) + F)
//! ```
//!
//! The camera branch passes through a gradient-reversal op before its
//! classifier, so every shared parameter upstream of it is trained to make
//! camera identity harder to predict.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{PoolMode, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApraConfig {
    pub channels: usize,
    /// Channel-MLP bottleneck is `channels / reduction_ratio`, with the ratio
    /// clamped to `channels`.
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Gradient multiplier magnitude on the camera branch (`-mu` is applied).
    pub reversal_scale: f64,
    /// Weight of the camera cross-entropy in the combined loss.
    pub camera_loss_weight: f64,
    /// When false the reversal op is replaced by identity (ablation).
    pub reverse_gradients: bool,
}

impl ApraConfig {
    pub fn new(channels: usize) -> Self {
        ApraConfig {
            channels,
            reduction_ratio: 16,
            spatial_kernel: 7,
            reversal_scale: 1.0,
            camera_loss_weight: crate::losses::DEFAULT_CAMERA_WEIGHT,
            reverse_gradients: true,
        }
    }

    pub fn effective_ratio(&self) -> usize {
        self.reduction_ratio.min(self.channels).max(1)
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.effective_ratio()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("apra: channels must be positive"));
        }
        if self.reduction_ratio == 0 || !self.channels.is_multiple_of(self.effective_ratio()) {
            return Err(Error::invalid(format!(
                "apra: {} channels not divisible by reduction ratio {}",
                self.channels, self.reduction_ratio
            )));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "apra: spatial kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        if !(self.reversal_scale > 0.0 && self.reversal_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "apra: reversal scale must be positive, got {}",
                self.reversal_scale
            )));
        }
        if !(self.camera_loss_weight >= 0.0 && self.camera_loss_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "apra: camera loss weight must be non-negative, got {}",
                self.camera_loss_weight
            )));
        }
        Ok(())
    }
}

/// Weight `(out, in, kh, kw)` and bias `(1, out, 1, 1)` of a dense or conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize, k: usize) -> Self {
        Layer {
            weight: Tensor::zeros(Shape::new(out, inp, k, k)),
            bias: Tensor::zeros(Shape::new(1, out, 1, 1)),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, rng: &mut R) -> Self {
        Self::with_bound(out, inp, k, 1.0 / ((inp * k * k) as f64).sqrt(), rng)
    }

    /// Weights with variance `variance_scale / fan_in` (2 is He init), zero bias.
    pub fn uniform_scaled<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, variance_scale: f64, rng: &mut R) -> Self {
        Self::with_bound(out, inp, k, (3.0 * variance_scale / (inp * k * k) as f64).sqrt(), rng)
    }

    fn with_bound<R: Rng + ?Sized>(out: usize, inp: usize, k: usize, bound: f64, rng: &mut R) -> Self {
        Layer {
            weight: Tensor::uniform(Shape::new(out, inp, k, k), -bound, bound, rng),
            bias: Tensor::zeros(Shape::new(1, out, 1, 1)),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl LayerVars {
    pub fn dense(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.dense(x, self.weight, self.bias)
    }

    pub fn conv(&self, tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, self.weight, self.bias, stride)
    }
}

/// Trainable tensors of the block and its camera classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ApraParams {
    pub channel_mlp_1: Layer,
    pub channel_mlp_2: Layer,
    pub spatial_conv: Layer,
    pub camera_head: Layer,
}

pub const SECTIONS: [&str; 4] = ["channel_mlp_1", "channel_mlp_2", "spatial_conv", "camera_head"];

impl ApraParams {
    pub fn zeros(config: &ApraConfig, num_cameras: usize) -> Self {
        let (c, h, k) = (config.channels, config.hidden(), config.spatial_kernel);
        ApraParams {
            channel_mlp_1: Layer::zeros(h, c, 1),
            channel_mlp_2: Layer::zeros(c, h, 1),
            spatial_conv: Layer::zeros(1, 2, k),
            camera_head: Layer::zeros(num_cameras, c, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &ApraConfig, num_cameras: usize, rng: &mut R) -> Self {
        let (c, h, k) = (config.channels, config.hidden(), config.spatial_kernel);
        ApraParams {
            channel_mlp_1: Layer::init(h, c, 1, rng),
            channel_mlp_2: Layer::init(c, h, 1, rng),
            spatial_conv: Layer::init(1, 2, k, rng),
            camera_head: Layer::init(num_cameras, c, 1, rng),
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.camera_head.weight.shape().n()
    }

    pub fn layers(&self) -> [&Layer; 4] {
        [&self.channel_mlp_1, &self.channel_mlp_2, &self.spatial_conv, &self.camera_head]
    }

    /// Tensors in [`ApraVars::all`] order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn layers_mut(&mut self) -> [&mut Layer; 4] {
        [
            &mut self.channel_mlp_1,
            &mut self.channel_mlp_2,
            &mut self.spatial_conv,
            &mut self.camera_head,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> ApraVars {
        ApraVars {
            channel_mlp_1: self.channel_mlp_1.register(tape),
            channel_mlp_2: self.channel_mlp_2.register(tape),
            spatial_conv: self.spatial_conv.register(tape),
            camera_head: self.camera_head.register(tape),
        }
    }

    /// Named sections, each holding the weight then bias tensor in fixture format.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        for (name, layer) in SECTIONS.iter().zip(self.layers()) {
            let _ = writeln!(out, "[{name}]");
            out.push_str(&layer.weight.to_fixture());
            out.push_str(&layer.bias.to_fixture());
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut found: Vec<Option<Layer>> = vec![None, None, None, None];
        let mut current: Option<usize> = None;
        let mut body = String::new();
        let flush = |slot: Option<usize>, body: &mut String, found: &mut Vec<Option<Layer>>| -> Result<()> {
            if let Some(i) = slot {
                let mut tokens = body.split_whitespace();
                let weight = Tensor::parse_tokens(&mut tokens)?;
                let bias = Tensor::parse_tokens(&mut tokens)?;
                if tokens.next().is_some() {
                    return Err(Error::invalid(format!("checkpoint section {}: trailing values", SECTIONS[i])));
                }
                found[i] = Some(Layer { weight, bias });
            }
            body.clear();
            Ok(())
        };
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                flush(current, &mut body, &mut found)?;
                let idx = SECTIONS
                    .iter()
                    .position(|s| *s == name)
                    .ok_or_else(|| Error::invalid(format!("checkpoint: unknown section [{name}]")))?;
                current = Some(idx);
            } else if !trimmed.is_empty() {
                if current.is_none() {
                    return Err(Error::invalid("checkpoint: values before first section"));
                }
                body.push_str(trimmed);
                body.push('\n');
            }
        }
        flush(current, &mut body, &mut found)?;
        let mut layers = found.into_iter().enumerate().map(|(i, l)| {
            l.ok_or_else(|| Error::invalid(format!("checkpoint: missing section [{}]", SECTIONS[i])))
        });
        Ok(ApraParams {
            channel_mlp_1: layers.next().unwrap()?,
            channel_mlp_2: layers.next().unwrap()?,
            spatial_conv: layers.next().unwrap()?,
            camera_head: layers.next().unwrap()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

/// [`ApraParams`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ApraVars {
    pub channel_mlp_1: LayerVars,
    pub channel_mlp_2: LayerVars,
    pub spatial_conv: LayerVars,
    pub camera_head: LayerVars,
}

impl ApraVars {
    /// Inverse of [`ApraVars::all`].
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::invalid(format!("expected 8 apra vars, got {}", v.len())));
        }
        let layer = |i: usize| LayerVars {
            weight: v[2 * i],
            bias: v[2 * i + 1],
        };
        Ok(ApraVars {
            channel_mlp_1: layer(0),
            channel_mlp_2: layer(1),
            spatial_conv: layer(2),
            camera_head: layer(3),
        })
    }

    pub fn all(&self) -> [Var; 8] {
        [
            self.channel_mlp_1.weight,
            self.channel_mlp_1.bias,
            self.channel_mlp_2.weight,
            self.channel_mlp_2.bias,
            self.spatial_conv.weight,
            self.spatial_conv.bias,
            self.camera_head.weight,
            self.camera_head.bias,
        ]
    }

    /// Parameters shared by both branches (everything but the camera head).
    pub fn attention(&self) -> [Var; 6] {
        let a = self.all();
        [a[0], a[1], a[2], a[3], a[4], a[5]]
    }
}

/// An attention map and its complement `1 - map`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionPair {
    pub forward: Var,
    pub inverse: Var,
}

impl AttentionPair {
    pub fn from_map(tape: &mut Tape, forward: Var) -> Result<Self> {
        let inverse = tape.one_minus(forward)?;
        Ok(AttentionPair { forward, inverse })
    }

    pub fn swapped(self) -> Self {
        AttentionPair {
            forward: self.inverse,
            inverse: self.forward,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ApraOutput {
    pub person: Var,
    pub camera: Var,
    pub channel: AttentionPair,
    pub spatial: AttentionPair,
}

fn check_channels(tape: &Tape, f: Var, channels: usize) -> Result<Shape> {
    let s = tape.shape(f);
    if s.c() != channels {
        return Err(Error::invalid(format!(
            "apra configured for {channels} channels, got feature map {s}"
        )));
    }
    Ok(s)
}

/// `sigmoid(mlp(avg_pool(f)) + mlp(max_pool(f)))`, shape `(N, C, 1, 1)`.
pub fn channel_attention(tape: &mut Tape, f: Var, vars: &ApraVars) -> Result<AttentionPair> {
    let c = tape.shape(vars.channel_mlp_1.weight).c();
    check_channels(tape, f, c)?;
    let mut branch = |mode| -> Result<Var> {
        let pooled = tape.pool_global(f, mode)?;
        let h = vars.channel_mlp_1.dense(tape, pooled)?;
        let h = tape.relu(h)?;
        vars.channel_mlp_2.dense(tape, h)
    };
    let avg = branch(PoolMode::Avg)?;
    let max = branch(PoolMode::Max)?;
    let logits = tape.add(avg, max)?;
    let map = tape.sigmoid(logits)?;
    AttentionPair::from_map(tape, map)
}

/// `sigmoid(conv([avg_c(f_mod); max_c(f_mod)]))`, shape `(N, 1, H, W)`.
pub fn spatial_attention(tape: &mut Tape, f_mod: Var, vars: &ApraVars) -> Result<AttentionPair> {
    let avg = tape.pool_channel(f_mod, PoolMode::Avg)?;
    let max = tape.pool_channel(f_mod, PoolMode::Max)?;
    let stacked = tape.concat_channel(avg, max)?;
    let logits = vars.spatial_conv.conv(tape, stacked, 1)?;
    let map = tape.sigmoid(logits)?;
    AttentionPair::from_map(tape, map)
}

/// `(relu((f * Mc) * Ms + f), relu((f * Mc') * Ms' + f))` for given attention pairs.
pub fn split_branches(
    tape: &mut Tape,
    f: Var,
    channel: &AttentionPair,
    spatial: &AttentionPair,
) -> Result<(Var, Var)> {
    let mut branch = |mc: Var, ms: Var| -> Result<Var> {
        let gated = tape.mul_broadcast(f, mc)?;
        let gated = tape.mul_broadcast(gated, ms)?;
        let res = tape.add(gated, f)?;
        tape.relu(res)
    };
    let person = branch(channel.forward, spatial.forward)?;
    let camera = branch(channel.inverse, spatial.inverse)?;
    Ok((person, camera))
}

/// Full block: channel attention, spatial attention on `f * M_c`, branch split.
pub fn apra_forward(tape: &mut Tape, f: Var, vars: &ApraVars) -> Result<ApraOutput> {
    let channel = channel_attention(tape, f, vars)?;
    let modulated = tape.mul_broadcast(f, channel.forward)?;
    let spatial = spatial_attention(tape, modulated, vars)?;
    let (person, camera) = split_branches(tape, f, &channel, &spatial)?;
    Ok(ApraOutput {
        person,
        camera,
        channel,
        spatial,
    })
}

/// Global average pool then dense, giving `(N, num_cameras, 1, 1)` logits.
pub fn camera_head(tape: &mut Tape, f_camera: Var, vars: &ApraVars) -> Result<Var> {
    let pooled = tape.pool_global(f_camera, PoolMode::Avg)?;
    vars.camera_head.dense(tape, pooled)
}

/// Reversal (unless disabled in `config`) followed by the camera head.
pub fn camera_logits(tape: &mut Tape, f_camera: Var, vars: &ApraVars, config: &ApraConfig) -> Result<Var> {
    let x = if config.reverse_gradients {
        tape.gradient_reversal(f_camera, config.reversal_scale)?
    } else {
        f_camera
    };
    camera_head(tape, x, vars)
}
