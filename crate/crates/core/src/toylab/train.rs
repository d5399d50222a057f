use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{stack_images, Insertion, TinyBackbone};
use super::probe::{camera_probe_with, ProbeConfig};
use super::world::{ToySample, ToyWorld};
use crate::apra::ApraConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::losses::{combined_loss, LossTerms, DEFAULT_CAMERA_WEIGHT, DEFAULT_MARGIN};
use crate::metrics::{evaluate, EmbeddingRecord, Report, RetrievalProtocol, Split};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity per batch.
    pub k: usize,
    pub margin: f64,
    /// Weight of the camera loss (λ).
    pub camera_weight: f64,
    /// Include the attention block and its camera branch.
    pub apra: bool,
    pub insertion: Insertion,
    /// Gradient reversal scale (μ).
    pub reversal_scale: f64,
    /// Ablation switch: camera-branch gradients pass unreversed when false.
    pub reverse_gradients: bool,
    /// Step the camera head at `learning_rate / camera_weight`, so it learns
    /// as if its loss were unweighted, as under a scale-invariant optimizer.
    /// Shared parameters still see the weighted, reversed camera gradient.
    pub decouple_camera_head: bool,
    pub probe: ProbeConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            p: 4,
            k: 4,
            margin: DEFAULT_MARGIN,
            camera_weight: DEFAULT_CAMERA_WEIGHT,
            apra: true,
            insertion: Insertion::default(),
            reversal_scale: 1.0,
            reverse_gradients: true,
            decouple_camera_head: true,
            probe: ProbeConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.p < 2 || self.k < 2 {
            return bad("PK batches need p >= 2 and k >= 2");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)");
        }
        if !(self.camera_weight >= 0.0) || !(self.reversal_scale > 0.0) || !(self.margin > 0.0) {
            return bad("camera weight must be non-negative; reversal scale and margin positive");
        }
        Ok(())
    }

    pub fn apra_config(&self) -> Option<ApraConfig> {
        self.apra.then(|| {
            let mut cfg = ApraConfig::new(self.insertion.channels());
            cfg.reversal_scale = self.reversal_scale;
            cfg.camera_loss_weight = self.camera_weight;
            cfg.reverse_gradients = self.reverse_gradients;
            cfg
        })
    }

    pub fn variant_name(&self) -> &'static str {
        if self.apra { "apra" } else { "baseline" }
    }
}

/// Plain SGD with heavy-ball momentum: `v = momentum * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        self.step_scaled(params, grads, &vec![1.0; params.len()])
    }

    /// Step with a learning-rate multiplier per parameter tensor.
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr_scale: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr_scale.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
        }
        for (((p, g), v), scale) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(lr_scale) {
            if p.shape() != g.shape() || v.len() != g.data().len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= scale * self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_person_ce: f64,
    pub loss_triplet: f64,
    /// Absent without the attention block.
    pub loss_camera_ce: Option<f64>,
    pub probe_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_person_ce,loss_triplet,loss_camera_ce,probe_acc";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        let cam = e.loss_camera_ce.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{:.4}\n",
            e.epoch, e.loss_person_ce, e.loss_triplet, cam, e.probe_acc
        ));
    }
    out
}

/// One minibatch: image indices into the training set with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub persons: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Shuffles identities, takes `p` at a time, and `k` images of each
/// (without replacement when possible). A trailing group smaller than `p` is dropped.
pub fn pk_batches(train: &[ToySample], p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut by_person: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_person.entry(s.person_id).or_default().push(i);
    }
    let mut persons: Vec<u32> = by_person.keys().copied().collect();
    persons.shuffle(rng);
    persons
        .chunks_exact(p)
        .map(|group| {
            let mut indices: Vec<usize> = Vec::with_capacity(p * k);
            for pid in group {
                let mut pool = by_person[pid].clone();
                pool.shuffle(rng);
                indices.extend(pool.iter().cycle().take(k));
            }
            Batch {
                persons: indices.iter().map(|&i| train[i].person_id as usize).collect(),
                cameras: indices.iter().map(|&i| train[i].camera_id as usize).collect(),
                indices,
            }
        })
        .collect()
}

/// Loss terms and gradients for every parameter, in [`TinyBackbone::params_mut`] order.
pub fn loss_and_grads(
    model: &TinyBackbone,
    images: Tensor,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let mut tape = Tape::with_exec(config.exec);
    let vars = model.register(&mut tape);
    let x = tape.constant(images);
    let out = model.forward(&mut tape, &vars, x)?;
    let person_ce = tape.cross_entropy(out.person_logits, &batch.persons)?;
    let triplet = tape.triplet_batch_hard(out.embedding, &batch.persons, config.margin)?;
    let camera_ce = match out.camera_logits {
        Some(logits) => Some(tape.cross_entropy(logits, &batch.cameras)?),
        None => None,
    };
    let loss = combined_loss(&mut tape, person_ce, triplet, camera_ce, config.camera_weight)?;
    let terms = LossTerms {
        person_ce: tape.value(person_ce).item()?,
        triplet: tape.value(triplet).item()?,
        camera_ce: camera_ce.map(|v| tape.value(v).item()).transpose()?.unwrap_or(0.0),
    };
    let grads = tape.backward(loss)?;
    let all = vars.all();
    let grads = all.iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect();
    Ok((terms, grads))
}

fn image_refs(samples: &[ToySample]) -> Vec<&[f64]> {
    samples.iter().map(|s| s.image.as_slice()).collect()
}

/// Probe accuracy on embeddings of the held-out persons (query and gallery).
pub fn probe_accuracy(model: &TinyBackbone, world: &ToyWorld, config: &TrainConfig) -> Result<f64> {
    let samples: Vec<&ToySample> = world.query.iter().chain(&world.gallery).collect();
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let emb = model.embed_images(&images, world.config.image, config.exec)?;
    let cams: Vec<u32> = samples.iter().map(|s| s.camera_id).collect();
    camera_probe_with(&emb, &cams, &config.probe)
}

fn records(model: &TinyBackbone, world: &ToyWorld, samples: &[ToySample], split: Split, exec: Exec) -> Result<Vec<EmbeddingRecord>> {
    let emb = model.embed_images(&image_refs(samples), world.config.image, exec)?;
    Ok(samples
        .iter()
        .zip(emb)
        .map(|(s, v)| EmbeddingRecord::new(s.person_id, s.camera_id, split, v))
        .collect())
}

/// Query and gallery embedding records of the held-out persons.
pub fn embed_test_set(model: &TinyBackbone, world: &ToyWorld, exec: Exec) -> Result<(Vec<EmbeddingRecord>, Vec<EmbeddingRecord>)> {
    Ok((
        records(model, world, &world.query, Split::Query, exec)?,
        records(model, world, &world.gallery, Split::Gallery, exec)?,
    ))
}

pub fn evaluate_model(model: &TinyBackbone, world: &ToyWorld, method: &str, exec: Exec) -> Result<Report> {
    let (q, g) = embed_test_set(model, world, exec)?;
    let eval = evaluate(&q, &g, &RetrievalProtocol::default(), exec)?;
    Report::from_evaluation(&eval, "toyworld", method)
}

pub fn build_model(world: &ToyWorld, config: &TrainConfig, seed: u64) -> Result<TinyBackbone> {
    TinyBackbone::init(
        world.config.image[0],
        world.config.num_train_persons,
        world.config.num_cameras,
        config.apra_config(),
        config.insertion,
        seed,
    )
}

/// Per-tensor learning-rate multipliers in [`TinyBackbone::params_mut`] order.
pub fn lr_scales(model: &mut TinyBackbone, config: &TrainConfig) -> Vec<f64> {
    let has_head = model.apra.is_some();
    let mut scales = vec![1.0; model.params_mut().len()];
    if has_head && config.decouple_camera_head && config.camera_weight > 0.0 {
        // The camera head's weight and bias are the last two tensors.
        let n = scales.len();
        scales[n - 2..].fill(1.0 / config.camera_weight);
    }
    scales
}

/// Trains in place; batch order depends only on `seed`, so variants see the same batches.
pub fn train(model: &mut TinyBackbone, world: &ToyWorld, config: &TrainConfig, seed: u64) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(20);
    let mut sgd = Sgd::new(config.learning_rate, config.momentum);
    let lr_scale = lr_scales(model, config);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let batches = pk_batches(&world.train, config.p, config.k, &mut rng);
        if batches.is_empty() {
            return Err(Error::DegenerateBatch(format!(
                "{} train identities cannot fill a batch of {}",
                world.config.num_train_persons, config.p
            )));
        }
        let mut sums = LossTerms::default();
        let mut camera_sum = 0.0;
        for batch in &batches {
            let refs: Vec<&[f64]> = batch.indices.iter().map(|&i| world.train[i].image.as_slice()).collect();
            let images = stack_images(&refs, world.config.image)?;
            let (terms, grads) = loss_and_grads(model, images, batch, config)?;
            let cam = terms.camera_ce;
            let total = terms.combined(config.camera_weight);
            if !total.is_finite() || !cam.is_finite() {
                let what = if !terms.person_ce.is_finite() {
                    "person cross-entropy"
                } else if !terms.triplet.is_finite() {
                    "triplet"
                } else {
                    "camera cross-entropy"
                };
                return Err(Error::Diverged { epoch, what });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, what: "gradient" });
            }
            sums.person_ce += terms.person_ce;
            sums.triplet += terms.triplet;
            camera_sum += cam;
            sgd.step_scaled(&mut model.params_mut(), &grads, &lr_scale)?;
        }
        let n = batches.len() as f64;
        log.push(EpochLog {
            epoch,
            loss_person_ce: sums.person_ce / n,
            loss_triplet: sums.triplet / n,
            loss_camera_ce: model.apra.is_some().then_some(camera_sum / n),
            probe_acc: probe_accuracy(model, world, config)?,
        });
    }
    Ok(log)
}
