//! End-to-end finetuning with L1, perceptual and adversarial objectives.
//!
//! Each step first updates the retoucher against the current
//! discriminator, then updates the discriminator on the real targets and
//! the (detached) retouched batch. R1 is applied lazily every
//! `r1_interval` steps. Batches, augmentation factors and epoch orders are
//! derived from `(seed, step)`, so a resumed run replays the uninterrupted
//! one exactly.

mod disc;
mod losses;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retouch_tensor::{Adam, AdamConfig, Array, ParamStore, Tape};
use serde::{Deserialize, Serialize};

pub use disc::{DiscConfig, Discriminator, PREFIX as DISC_PREFIX};
pub use losses::{
    loss_adversarial_d, loss_adversarial_g, loss_l1, loss_perceptual, r1_penalty, r1_step, r1_surrogate,
};

use crate::checkpoint::{model_from_archive, Archive, ArchiveMeta};
use crate::data::{augment, AugmentationSpec, ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::layers::{init_params, validate_params};
use crate::model::{ModelConfig, Retoucher};
use crate::perceptual::{ConvPyramid, FeatureExtractor};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_perc: f64,
    pub w_adv: f64,
    pub r1_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_l1: 1.0, w_perc: 0.8, w_adv: 0.05, r1_gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_l1, self.w_perc, self.w_adv, self.r1_gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.w_l1 + self.w_perc + self.w_adv <= 0.0 {
            return Err(Error::Config("at least one generator loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: [f64; 2],
    pub seed: u64,
    /// Save the full training state every this many steps (0: never).
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub augmentation: bool,
    pub r1_interval: u64,
    pub disc: DiscConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_g: 2e-3,
            lr_d: 2e-3,
            betas: [0.9, 0.99],
            seed: 0,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            augmentation: true,
            r1_interval: 4,
            disc: DiscConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.r1_interval == 0 {
            return Err(Error::Config("steps, batch_size and r1_interval must be positive".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        self.loss.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.betas[0], beta2: self.betas[1], ..AdamConfig::default() }
    }
}

/// Scalars recorded for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l1: f64,
    pub perc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    /// Last computed R1 value (updated every `r1_interval` steps).
    pub r1: f64,
    pub g_total: f64,
}

/// Inputs and targets of one step, `(B, 3, R, R)` each.
pub struct Batch {
    pub inputs: Array<f32>,
    pub targets: Array<f32>,
}

const EPOCH_TAG: u64 = 0xE90C;
const AUG_TAG: u64 = 0xA06;
const MODEL_TAG: u64 = 0x30DE1;
const DISC_TAG: u64 = 0xD15C;
/// R1 finite-difference perturbation, as an RMS per pixel.
const R1_STEP_SCALE: f64 = 1e-2;

pub struct Trainer {
    config: TrainConfig,
    model: Retoucher<f32>,
    disc: Discriminator,
    disc_params: ParamStore<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    extractor: Box<dyn FeatureExtractor<f32>>,
    step: u64,
    last_r1: f64,
}

impl Trainer {
    /// Seeded random initialization of the retoucher and discriminator.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Retoucher::new(model_config, derive_seed(config.seed, &[MODEL_TAG]))?;
        Self::with_model(model, config)
    }

    /// Starts from an existing retoucher, e.g. one whose backbone was
    /// imported from a pretrained checkpoint.
    pub fn with_model(model: Retoucher<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let disc = Discriminator::new(&config.disc, model.resolution())?;
        let disc_params = init_params(&disc.specs(), &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[DISC_TAG])));
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_g)),
            opt_d: Adam::new(config.adam(config.lr_d)),
            config,
            model,
            disc,
            disc_params,
            extractor: Box::new(ConvPyramid::default()),
            step: 0,
            last_r1: 0.0,
        })
    }

    /// Replaces the discriminator weights (e.g. imported ones).
    pub fn set_disc_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        validate_params(&self.disc.specs(), &params)?;
        self.disc_params = params;
        Ok(())
    }

    pub fn set_extractor(&mut self, extractor: Box<dyn FeatureExtractor<f32>>) {
        self.extractor = extractor;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Retoucher<f32> {
        &self.model
    }

    pub fn into_model(self) -> Retoucher<f32> {
        self.model
    }

    pub fn disc_params(&self) -> &ParamStore<f32> {
        &self.disc_params
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor<f32> {
        self.extractor.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Deterministic batch for `step`: the epoch's seeded permutation,
    /// with a fresh augmentation factor per sample per epoch.
    pub fn batch_for_step(&self, data: &[PairedSample], step: u64) -> Result<Batch> {
        if data.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let b = self.config.batch_size.min(data.len());
        let per_epoch = (data.len() / b) as u64;
        let epoch = step / per_epoch;
        let start = ((step % per_epoch) as usize) * b;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[EPOCH_TAG, epoch])));
        let aug = AugmentationSpec { enabled: self.config.augmentation, seed: derive_seed(self.config.seed, &[AUG_TAG]) };
        let mut inputs = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for &k in &order[start..start + b] {
            inputs.push(augment(&data[k], aug.draw(epoch, k as u64))?);
            targets.push(&data[k].clean);
        }
        Ok(Batch { inputs: ImageTensor::stack(&inputs.iter().collect::<Vec<_>>())?, targets: ImageTensor::stack(&targets)? })
    }

    /// One retoucher update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let w = self.config.loss.clone();
        let adversarial = w.w_adv > 0.0;

        let tape = Tape::new();
        tape.train(self.model.params());
        let x = tape.constant(batch.inputs.clone());
        let target = tape.constant(batch.targets.clone());
        let out = self.model.forward(&tape, x, None)?.image;
        let l1 = loss_l1(out, target)?;
        let perc = loss_perceptual(out, target, self.extractor.as_ref())?;
        let mut total = l1.mul_scalar(w.w_l1).add(perc.mul_scalar(w.w_perc));
        let mut adv_g = 0.0;
        if adversarial {
            let g = loss_adversarial_g(self.disc.forward(&tape, &self.disc_params, out)?)?;
            adv_g = g.item() as f64;
            total = total.add(g.mul_scalar(w.w_adv));
        }
        let mut metrics = StepMetrics {
            step: self.step,
            l1: l1.item() as f64,
            perc: perc.item() as f64,
            adv_g,
            adv_d: 0.0,
            r1: self.last_r1,
            g_total: total.item() as f64,
        };
        if !metrics.g_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite generator loss at step {}: {metrics:?}", self.step)));
        }
        let grads = tape.backward(total).for_store(&tape, self.model.params());
        check_grads(&grads, "retoucher", self.step)?;
        let fake = out.value().as_ref().clone();
        drop(tape);
        self.opt_g.step(self.model.params_mut(), &grads);

        if adversarial {
            let tape = Tape::new();
            tape.train(&self.disc_params);
            let real_logits = self.disc.forward(&tape, &self.disc_params, tape.constant(batch.targets.clone()))?;
            let fake_logits = self.disc.forward(&tape, &self.disc_params, tape.constant(fake))?;
            let adv_d = loss_adversarial_d(real_logits, fake_logits)?;
            metrics.adv_d = adv_d.item() as f64;
            let mut d_total = adv_d;
            if w.r1_gamma > 0.0 && self.step % self.config.r1_interval == 0 {
                let (r1, input_grad) = r1_penalty(&self.disc, &self.disc_params, &batch.targets)?;
                let eps = r1_step(&input_grad, R1_STEP_SCALE);
                let surrogate = r1_surrogate(&tape, &self.disc, &self.disc_params, &batch.targets, &input_grad, eps)?;
                d_total = d_total.add(surrogate.mul_scalar(0.5 * w.r1_gamma * self.config.r1_interval as f64));
                self.last_r1 = r1;
                metrics.r1 = r1;
            }
            if !d_total.value().all_finite() {
                return Err(Error::Numeric(format!("non-finite discriminator loss at step {}: {metrics:?}", self.step)));
            }
            let grads = tape.backward(d_total).for_store(&tape, &self.disc_params);
            check_grads(&grads, "discriminator", self.step)?;
            drop(tape);
            self.opt_d.step(&mut self.disc_params, &grads);
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `config.steps`, appending one JSON line per step to
    /// `log` and saving the state every `checkpoint_every` steps into
    /// `checkpoint_dir`.
    pub fn fit(
        &mut self,
        data: &[PairedSample],
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepMetrics>> {
        let mut trace = Vec::new();
        while self.step < self.config.steps {
            let batch = self.batch_for_step(data, self.step)?;
            let m = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io("<metrics log>", e))?;
            }
            if m.step % 100 == 0 {
                log::info!("step {} l1 {:.5} perc {:.5} adv_g {:.4} adv_d {:.4}", m.step, m.l1, m.perc, m.adv_g, m.adv_d);
            }
            trace.push(m);
            if let Some(dir) = checkpoint_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save_state(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        Ok(trace)
    }

    /// Archive of the complete training state.
    pub fn state_archive(&self) -> Result<Archive> {
        let config = serde_json::json!({ "model": self.model.config(), "train": self.config });
        let mut meta = ArchiveMeta::new("training_state", config);
        let (g_steps, g_moments) = self.opt_g.export();
        let (d_steps, d_moments) = self.opt_d.export();
        meta.state = serde_json::json!({
            "step": self.step,
            "last_r1": self.last_r1,
            "opt_g_steps": g_steps,
            "opt_d_steps": d_steps,
            "extractor": self.extractor.name(),
        });
        let mut archive = Archive::new(meta);
        archive.insert_store("g.", self.model.params());
        archive.insert_store("d.", &self.disc_params);
        for (name, a) in g_moments {
            archive.tensors.insert(format!("opt_g.{name}"), a);
        }
        for (name, a) in d_moments {
            archive.tensors.insert(format!("opt_d.{name}"), a);
        }
        Ok(archive)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.state_archive()?.save(path)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.meta.kind != "training_state" {
            return Err(Error::Checkpoint(vec![format!("archive kind `{}` is not a training state", archive.meta.kind)]));
        }
        let config: TrainConfig = serde_json::from_value(archive.meta.config.get("train").cloned().unwrap_or_default())?;
        let model = model_from_archive(archive, "g.")?;
        let mut trainer = Self::with_model(model, config)?;
        trainer.set_disc_params(archive.store("d."))?;
        let state = &archive.meta.state;
        let field = |k: &str| {
            state.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint(vec![format!("state lacks `{k}`")]))
        };
        trainer.step = field("step")?;
        trainer.last_r1 = state.get("last_r1").and_then(|v| v.as_f64()).unwrap_or(0.0);
        let moments = |prefix: &str| archive.store(prefix).iter().map(|(n, a)| (n.to_string(), a.clone())).collect::<Vec<_>>();
        trainer.opt_g = Adam::import(trainer.config.adam(trainer.config.lr_g), field("opt_g_steps")?, moments("opt_g."))
            .map_err(|e| Error::Checkpoint(vec![e]))?;
        trainer.opt_d = Adam::import(trainer.config.adam(trainer.config.lr_d), field("opt_d_steps")?, moments("opt_d."))
            .map_err(|e| Error::Checkpoint(vec![e]))?;
        Ok(trainer)
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("state-{step:06}.safetensors"))
}

fn check_grads(grads: &HashMap<String, Array<f32>>, what: &str, step: u64) -> Result<()> {
    let mut names: Vec<&String> = grads.iter().filter(|(_, g)| !g.all_finite()).map(|(n, _)| n).collect();
    if names.is_empty() {
        return Ok(());
    }
    names.sort();
    Err(Error::Numeric(format!("non-finite {what} gradients at step {step} in {names:?}")))
}
