use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apra::{apra_forward, camera_logits, ApraConfig, ApraParams, ApraVars, Layer, LayerVars};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{PoolMode, Shape, Tape, Tensor, Var};

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const EMBEDDING_DIM: usize = 32;
pub const KERNEL: usize = 3;

/// Where the attention block sits in the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    #[default]
    AfterBlock1,
    AfterBlock2,
}

impl Insertion {
    pub fn channels(self) -> usize {
        match self {
            Insertion::AfterBlock1 => CONV1_CHANNELS,
            Insertion::AfterBlock2 => CONV2_CHANNELS,
        }
    }
}

/// conv(3x3)+relu, conv(3x3, stride 2)+relu, global average pool, dense
/// embedding, dense person classifier; the attention block follows one of
/// the two convolutional blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyBackbone {
    pub conv1: Layer,
    pub conv2: Layer,
    pub embed: Layer,
    pub person_head: Layer,
    pub apra: Option<(ApraConfig, ApraParams)>,
    pub insertion: Insertion,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub conv1: LayerVars,
    pub conv2: LayerVars,
    pub embed: LayerVars,
    pub person_head: LayerVars,
    pub apra: Option<ApraVars>,
}

impl BackboneVars {
    /// Same order as [`TinyBackbone::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for l in [&self.conv1, &self.conv2, &self.embed, &self.person_head] {
            v.extend([l.weight, l.bias]);
        }
        if let Some(a) = &self.apra {
            v.extend(a.all());
        }
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub embedding: Var,
    pub person_logits: Var,
    pub camera_logits: Option<Var>,
}

impl TinyBackbone {
    /// Convolutions use He init and dense layers unit-variance init; the
    /// attention block keeps its own rule. Shared layers draw from one random stream and the attention block from
    /// another, so variants built from the same seed start identically.
    pub fn init(
        in_channels: usize,
        num_persons: usize,
        num_cameras: usize,
        apra: Option<ApraConfig>,
        insertion: Insertion,
        seed: u64,
    ) -> Result<Self> {
        let mut shared = ChaCha8Rng::seed_from_u64(seed);
        shared.set_stream(10);
        let mut attn = ChaCha8Rng::seed_from_u64(seed);
        attn.set_stream(11);
        let apra = match apra {
            Some(cfg) => {
                if cfg.channels != insertion.channels() {
                    return Err(Error::invalid(format!(
                        "attention block at {insertion:?} needs {} channels, got {}",
                        insertion.channels(),
                        cfg.channels
                    )));
                }
                cfg.validate()?;
                let params = ApraParams::init(&cfg, num_cameras, &mut attn);
                Some((cfg, params))
            }
            None => None,
        };
        Ok(TinyBackbone {
            conv1: Layer::uniform_scaled(CONV1_CHANNELS, in_channels, KERNEL, 2.0, &mut shared),
            conv2: Layer::uniform_scaled(CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, 2.0, &mut shared),
            embed: Layer::uniform_scaled(EMBEDDING_DIM, CONV2_CHANNELS, 1, 1.0, &mut shared),
            person_head: Layer::uniform_scaled(num_persons, EMBEDDING_DIM, 1, 1.0, &mut shared),
            apra,
            insertion,
        })
    }

    fn shared_layers(&self) -> [&Layer; 4] {
        [&self.conv1, &self.conv2, &self.embed, &self.person_head]
    }

    pub fn shared_param_count(&self) -> usize {
        self.shared_layers()
            .iter()
            .map(|l| l.weight.data().len() + l.bias.data().len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        let apra: usize = self.apra.iter().flat_map(|(_, p)| p.tensors()).map(|t| t.data().len()).sum();
        self.shared_param_count() + apra
    }

    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            conv1: self.conv1.register(tape),
            conv2: self.conv2.register(tape),
            embed: self.embed.register(tape),
            person_head: self.person_head.register(tape),
            apra: self.apra.as_ref().map(|(_, p)| p.register(tape)),
        }
    }

    /// Trainable tensors in [`BackboneVars::all`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for l in [&mut self.conv1, &mut self.conv2, &mut self.embed, &mut self.person_head] {
            v.extend(l.tensors_mut());
        }
        if let Some((_, p)) = &mut self.apra {
            for l in p.layers_mut() {
                v.extend(l.tensors_mut());
            }
        }
        v
    }

    pub fn forward(&self, tape: &mut Tape, vars: &BackboneVars, images: Var) -> Result<Outputs> {
        let mut camera = None;
        let mut attend = |tape: &mut Tape, x: Var, at: Insertion| -> Result<Var> {
            match (&self.apra, &vars.apra) {
                (Some((cfg, _)), Some(avars)) if self.insertion == at => {
                    let out = apra_forward(tape, x, avars)?;
                    camera = Some(camera_logits(tape, out.camera, avars, cfg)?);
                    Ok(out.person)
                }
                _ => Ok(x),
            }
        };
        let x = vars.conv1.conv(tape, images, 1)?;
        let x = tape.relu(x)?;
        let x = attend(tape, x, Insertion::AfterBlock1)?;
        let x = vars.conv2.conv(tape, x, 2)?;
        let x = tape.relu(x)?;
        let x = attend(tape, x, Insertion::AfterBlock2)?;
        let pooled = tape.pool_global(x, PoolMode::Avg)?;
        let embedding = vars.embed.dense(tape, pooled)?;
        let person_logits = vars.person_head.dense(tape, embedding)?;
        Ok(Outputs {
            embedding,
            person_logits,
            camera_logits: camera,
        })
    }

    /// Embeddings of `(C, H, W)` images, computed in chunks without gradients.
    pub fn embed_images(&self, images: &[&[f64]], image: [usize; 3], exec: Exec) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut tape = Tape::with_exec(exec);
            let vars = self.register(&mut tape);
            let x = tape.constant(stack_images(chunk, image)?);
            let o = self.forward(&mut tape, &vars, x)?;
            out.extend(tape.value(o.embedding).rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Packs `(C, H, W)` images into one `(N, C, H, W)` tensor.
pub fn stack_images(images: &[&[f64]], image: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = image;
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend_from_slice(img);
    }
    Tensor::from_vec(Shape::new(images.len(), c, h, w), data)
}
