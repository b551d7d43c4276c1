//! Scene-batched training: sampling, augmentation, loss, Adam updates,
//! loss history and resumable checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::imaging::{resize, SceneBatch, View};
use crate::network::{forward_inputs, from_network, prepare_scene, to_network, Model};
use crate::nn::Ctx;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Transform};
pub use checkpoint::{Checkpoint, RngState, TrainState};
pub use loss::{content_loss, perceptual_loss, total_loss, Extractor, ExtractorKind};
pub use optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iterations: u64,
    /// Square side every scene is resized to before training.
    pub input_size: usize,
    pub augmentation: AugmentConfig,
    pub perceptual_extractor: ExtractorKind,
    pub perceptual_seed: u64,
    pub perceptual_weights: Option<PathBuf>,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda1: 0.8,
            lambda2: 0.2,
            iterations: 2000,
            input_size: 64,
            augmentation: AugmentConfig::default(),
            perceptual_extractor: ExtractorKind::FixedRandomPyramid,
            perceptual_seed: 0,
            perceptual_weights: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda1 + self.lambda2 <= 0.0 {
            return bad(format!(
                "loss weights {} / {} must be non-negative with a positive sum",
                self.lambda1, self.lambda2
            ));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(4) {
            return bad(format!("input_size {} must be a positive multiple of 4", self.input_size));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Losses of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based index of the completed iteration.
    pub iteration: u64,
    pub scene: usize,
    pub content: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Loss history as CSV: `iteration,content,perceptual,total`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,content,perceptual,total\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.iteration, r.content, r.perceptual, r.total);
    }
    s
}

pub fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Resizes every image of every scene to `size×size` and checks references.
pub fn prepare_dataset(scenes: &[SceneBatch], size: usize) -> Result<Vec<SceneBatch>> {
    if scenes.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    scenes
        .iter()
        .map(|s| {
            if !s.has_references() {
                return Err(Error::Data(format!("scene {} has views without references", s.scene_id)));
            }
            if s.hw() == (size, size) {
                return Ok(s.clone());
            }
            let views = s
                .views
                .iter()
                .map(|v| {
                    Ok(View {
                        degraded: resize(&v.degraded, size, size)?,
                        reference: v.reference.as_ref().map(|r| resize(r, size, size)).transpose()?,
                        depth: v
                            .depth
                            .as_ref()
                            .map(|d| crate::imaging::DepthMap::new(resize(d, size, size)?.map(|x| x.clamp(0.0, 1.0))))
                            .transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            SceneBatch::new(s.scene_id.clone(), views)
        })
        .collect()
}

/// Outputs and losses of a forward pass without an update.
pub struct Evaluation {
    pub outputs: Vec<Tensor<f64>>,
    pub content: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Mutable training state: model, optimizer, sampler and history.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub history: Vec<LossRecord>,
    pub config: TrainConfig,
    phi: Extractor<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let phi =
            Extractor::new(config.perceptual_extractor, config.perceptual_seed, config.perceptual_weights.as_deref())?;
        Ok(Self {
            adam: Adam::new(config.adam(), &model.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            iteration: 0,
            history: Vec::new(),
            config,
            phi,
        })
    }

    /// Continues from an archive written by [`Trainer::save`].
    pub fn resume(ckpt: &Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        let model = checkpoint::load_model(ckpt)?;
        let mut t = Self::new(model, config)?;
        let state = ckpt.state.as_ref().ok_or_else(|| Error::Checkpoint("archive has no training state".into()))?;
        let (m, v) =
            ckpt.moments.clone().ok_or_else(|| Error::Checkpoint("archive has no optimizer moments".into()))?;
        t.adam.m = m;
        t.adam.v = v;
        t.adam.t = state.adam_t;
        t.rng = state.rng.restore()?;
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState { iteration: self.iteration, adam_t: self.adam.t, rng: RngState::capture(&self.rng) }
    }

    pub fn save(&self, path: &Path, run_config: &serde_json::Value) -> Result<()> {
        checkpoint::save(
            path,
            &self.model.config,
            run_config,
            &self.model.params,
            Some((&self.adam.m, &self.adam.v)),
            Some(&self.state()),
        )
    }

    /// Forward and loss on `batch` as given (no augmentation, no update).
    pub fn evaluate(&self, batch: &SceneBatch) -> Result<Evaluation> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.model.params);
        let inputs = prepare_scene::<T>(&self.model.config, batch)?;
        let outs = forward_inputs(&cx, &self.model, &inputs)?;
        let refs = reference_vars(&g, batch)?;
        let l = total_loss(&g, &outs, &refs, &self.phi, self.config.lambda1, self.config.lambda2)?;
        Ok(Evaluation {
            outputs: outs.iter().map(|o| from_network(&o.value())).collect(),
            content: l.content.item().as_f64(),
            perceptual: l.perceptual.item().as_f64(),
            total: l.total.item().as_f64(),
        })
    }

    /// One iteration: sample a scene, augment, forward, loss, backward, Adam.
    pub fn step(&mut self, dataset: &[SceneBatch]) -> Result<LossRecord> {
        if dataset.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let scene = self.rng.random_range(0..dataset.len());
        if !dataset[scene].has_references() {
            return Err(Error::Data(format!("scene {} has views without references", dataset[scene].scene_id)));
        }
        let batch = augment(&dataset[scene], &self.config.augmentation, &mut self.rng)?;
        let inputs = prepare_scene::<T>(&self.model.config, &batch)?;
        let iteration = self.iteration + 1;
        let (record, grads) = {
            let g = Graph::new();
            let cx = Ctx::new(&g, &self.model.params);
            let outs = forward_inputs(&cx, &self.model, &inputs)?;
            let refs = reference_vars(&g, &batch)?;
            let l = total_loss(&g, &outs, &refs, &self.phi, self.config.lambda1, self.config.lambda2)?;
            let record = LossRecord {
                iteration,
                scene,
                content: l.content.item().as_f64(),
                perceptual: l.perceptual.item().as_f64(),
                total: l.total.item().as_f64(),
            };
            if !record.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at iteration {iteration} (content {}, perceptual {})",
                    record.content, record.perceptual
                )));
            }
            (record, g.backward(l.total)?)
        };
        self.adam.step(&mut self.model.params, &grads)?;
        self.iteration = iteration;
        self.history.push(record);
        Ok(record)
    }
}

fn reference_vars<'g, T: Scalar>(g: &'g Graph<T>, batch: &SceneBatch) -> Result<Vec<crate::diff::Var<'g, T>>> {
    batch
        .views
        .iter()
        .map(|v| {
            let r = v
                .reference
                .as_ref()
                .ok_or_else(|| Error::Data(format!("scene {} lacks references", batch.scene_id)))?;
            Ok(g.input(to_network(r)))
        })
        .collect()
}

/// Runs `config.iterations` steps from a fresh trainer, calling `on_step` after each.
pub fn train<T: Scalar>(
    dataset: &[SceneBatch],
    model: Model<T>,
    config: TrainConfig,
    mut on_step: impl FnMut(&Trainer<T>, &LossRecord) -> Result<()>,
) -> Result<Trainer<T>> {
    let data = prepare_dataset(dataset, config.input_size)?;
    let mut t = Trainer::new(model, config)?;
    while t.iteration < t.config.iterations {
        let r = t.step(&data)?;
        on_step(&t, &r)?;
    }
    Ok(t)
}
