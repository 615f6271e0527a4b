//! Training and inference orchestration.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, clip_grad_norm, cosine_warmup_lr, global_norm, AdamState, AdamW, LrSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{set_loss, CostWeights, FocalParams, LossBreakdown};
use crate::metrics::DetectionRecord;
use crate::model::{Detector, ModelConfig, SceneInputs};
use crate::scene::{generate_scene, Scene, SceneSpec};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds parameter initialization.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of synthetic training scenes; scene `i` uses seed `scene.seed + i`.
    pub scenes: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many steps even if the schedule runs longer; 0 means
    /// the full schedule.
    pub max_steps: usize,
    /// Write a checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub loss: CostWeights,
    pub focal: FocalParams,
    pub scene: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 24,
            batch_size: 1,
            scenes: 100,
            peak_lr: 2e-4,
            min_lr: 2e-7,
            warmup_steps: 2000,
            weight_decay: 1e-2,
            grad_clip: 35.0,
            max_steps: 0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            loss: CostWeights::default(),
            focal: FocalParams::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.loss.validate()?;
        self.focal.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.scenes == 0 {
            return Err(Error::contract("epochs, batch_size and scenes must be positive"));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::contract(format!(
                "need 0 < min_lr {} ≤ peak_lr {}",
                self.min_lr, self.peak_lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::contract("weight_decay and grad_clip must be non-negative"));
        }
        if self.scene.rig.cameras != self.model.head.cameras {
            return Err(Error::contract(format!(
                "the scene rig has {} cameras, the model expects {}",
                self.scene.rig.cameras, self.model.head.cameras
            )));
        }
        let (sb, mb) = (&self.scene.bounds, &self.model.bounds);
        if !(mb.contains(&sb.min) && mb.contains(&sb.max)) {
            return Err(Error::contract("scene bounds must lie inside the model bounds"));
        }
        self.schedule().validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scenes.div_ceil(self.batch_size)
    }

    /// Schedule length `T = epochs × ⌈scenes / batch⌉`.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// Steps actually run: the schedule, cut at `max_steps` if set.
    pub fn run_steps(&self) -> usize {
        match self.max_steps {
            0 => self.total_steps(),
            m => m.min(self.total_steps()),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup: self.warmup_steps,
            total: self.total_steps(),
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn training_scenes(&self) -> Result<Vec<Scene>> {
        (0..self.scenes)
            .map(|i| generate_scene(&self.scene, self.scene.seed.wrapping_add(i as u64)))
            .collect()
    }
}

impl LrSchedule {
    fn validate(&self) -> Result<()> {
        cosine_warmup_lr(0, self).map(|_| ())
    }
}

/// Loss breakdown and optimizer state after one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based index of the update.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// `[cls, box]` per layer, averaged over the batch.
    pub layers: Vec<[f64; 2]>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub optimizer: AdamState,
    /// Updates applied so far.
    pub step: usize,
    scenes: Vec<(Scene, SceneInputs)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(&config.model, config.seed)?;
        let optimizer = AdamState::zeros_like(&detector.store);
        Self::assemble(config, detector, optimizer, 0)
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let detector = Detector::from_tensors(&config.model, ckpt.params.clone())?;
        let optimizer = match &ckpt.optimizer {
            Some(st) => st.clone(),
            None => AdamState::zeros_like(&detector.store),
        };
        let step = usize::try_from(ckpt.step).map_err(|_| Error::input("checkpoint step out of range"))?;
        Self::assemble(config, detector, optimizer, step)
    }

    fn assemble(config: TrainConfig, detector: Detector, optimizer: AdamState, step: usize) -> Result<Self> {
        let scenes = config
            .training_scenes()?
            .into_iter()
            .map(|s| {
                let inputs = SceneInputs::prepare(&s, &config.model)?;
                Ok((s, inputs))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            detector,
            optimizer,
            step,
            scenes,
        })
    }

    pub fn scenes(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().map(|(s, _)| s)
    }

    /// Scene indices used by update `step` (0-based).
    pub fn batch(&self, step: usize) -> std::ops::Range<usize> {
        let b = self.config.batch_size;
        let j = step % self.config.steps_per_epoch();
        j * b..((j + 1) * b).min(self.scenes.len())
    }

    /// Batch-mean loss and gradients (one per parameter, store order) at the
    /// current parameters.
    pub fn gradients(&self, batch: std::ops::Range<usize>) -> Result<(Vec<Tensor>, LossBreakdown)> {
        let n = batch.len() as f64;
        let mut grads: Vec<Tensor> = self.detector.store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        let mut mean = LossBreakdown::default();
        for (scene, inputs) in &self.scenes[batch] {
            let tape = Tape::new();
            let (bound, outs) = self.detector.forward(&tape, inputs)?;
            let (loss, br, _) = set_loss(&outs, &scene.gt, &self.config.loss, &self.config.focal, &self.config.model.bounds)?;
            let g = tape.backward(loss)?;
            for (acc, gi) in grads.iter_mut().zip(bound.collect_grads(&g)) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b / n);
            }
            mean.total += br.total / n;
            if mean.layers.is_empty() {
                mean.layers = vec![(0.0, 0.0); br.layers.len()];
            }
            for (m, (c, b)) in mean.layers.iter_mut().zip(br.layers) {
                m.0 += c / n;
                m.1 += b / n;
            }
        }
        Ok((grads, mean))
    }

    /// One optimizer update on the next batch. Update `s` (1-based) uses
    /// `lr(s)`, so the last scheduled update runs at the minimum rate.
    pub fn step(&mut self) -> Result<StepLog> {
        let (mut grads, br) = self.gradients(self.batch(self.step))?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = cosine_warmup_lr(self.step + 1, &self.config.schedule())?;
        adamw_step(&mut self.detector.store, &grads, &mut self.optimizer, lr, &self.config.optimizer())?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            lr,
            loss: br.total,
            layers: br.layers.iter().map(|&(c, b)| [c, b]).collect(),
            grad_norm,
        })
    }

    /// Runs updates until `run_steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        while self.step < self.config.run_steps() {
            let log = self.step()?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step as u64,
            config: self.config.to_toml(),
            params: self
                .detector
                .store
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Restores the configuration and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainConfig, Detector)> {
    let config = TrainConfig::from_toml(&ckpt.config)?;
    let detector = Detector::from_tensors(&config.model, ckpt.params.clone())?;
    Ok((config, detector))
}

/// Lines of the two serialized configurations that differ, `-` for the
/// checkpoint and `+` for the requested one.
pub fn config_diff(checkpoint: &ModelConfig, requested: &ModelConfig) -> Vec<String> {
    let a = toml::to_string(checkpoint).expect("config serializes");
    let b = toml::to_string(requested).expect("config serializes");
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    let mut out = Vec::new();
    for l in &la {
        if !lb.contains(l) {
            out.push(format!("- {l}"));
        }
    }
    for l in &lb {
        if !la.contains(l) {
            out.push(format!("+ {l}"));
        }
    }
    out
}

/// Refuses to run a checkpoint under a model configuration it was not
/// trained with.
pub fn check_model_config(checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    if checkpoint == requested {
        return Ok(());
    }
    Err(Error::contract(format!(
        "model configuration differs from the checkpoint:\n{}",
        config_diff(checkpoint, requested).join("\n")
    )))
}

/// Last-layer top-k detections for every scene, in scene order. No NMS.
pub fn infer(detector: &Detector, scenes: &[Scene]) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for scene in scenes {
        let inputs = SceneInputs::prepare(scene, &detector.config)?;
        for det in detector.detect(&inputs)? {
            out.push(DetectionRecord {
                sample: scene.sample.clone(),
                det,
                attribute: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
