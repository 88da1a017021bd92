//! Two-stage training.
//!
//! Stage one fits the generator alone to the Charbonnier penalty. Stage two
//! starts from a stage-one generator and alternates, every iteration, a
//! pixel-critic update, a feature-critic update and a generator update on
//! the weighted perceptual + L1 + adversarial objective with both critics
//! frozen.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, crop_patches, load_image, read_manifest, Augment, ColorSpace, ImagePlane, PatchSet, Range};
use crate::discriminators::{Discriminator, FeatureExtractor};
use crate::engine::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::generator::{self, Generator};
use crate::losses::{
    adv_loss_discriminator, adv_loss_generator, charbonnier_loss, feature_distance, l1_loss,
    total_generator_loss, CharbonnierParams, GeneratorTerms, LossValues, LossWeights,
};

pub use checkpoint::{Checkpoint, RngState};
pub use config::{HalvingMode, TrainConfig};
pub use infer::{evaluate, evaluate_pairs, infer_image, EvalOptions, TileOptions};
pub use optim::{lr_at, Adam, AdamConfig, AdamState};

const DATA_STREAM: u64 = 1;

/// Patch pairs in unit range, ready for batching.
#[derive(Clone, Debug)]
pub struct TrainingData {
    hr: Vec<ImagePlane>,
    lr: Vec<ImagePlane>,
    augment: bool,
}

impl TrainingData {
    pub fn new(set: &PatchSet, quantize_lr: bool, augment: bool) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::config("the training set is empty"));
        }
        let first = (&set.hr[0], &set.lr[0]);
        for (h, l) in set.hr.iter().zip(&set.lr) {
            if (h.width(), h.height(), l.width(), l.height())
                != (first.0.width(), first.0.height(), first.1.width(), first.1.height())
                || h.space() != ColorSpace::Rgb
                || l.space() != ColorSpace::Rgb
            {
                return Err(Error::config("training patches must be equally sized RGB pairs"));
            }
        }
        let lr = set
            .lr
            .iter()
            .map(|l| {
                let u = l.to_range(Range::Unit);
                if quantize_lr {
                    u.quantized()
                } else {
                    u
                }
            })
            .collect();
        Ok(TrainingData {
            hr: set.hr.iter().map(|h| h.to_range(Range::Unit)).collect(),
            lr,
            augment,
        })
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// Every pair, unaugmented, as `(lr, hr)` batches.
    pub fn all(&self) -> Result<(Tensor, Tensor)> {
        let lr: Vec<Tensor> = self.lr.iter().map(ImagePlane::to_tensor).collect();
        let hr: Vec<Tensor> = self.hr.iter().map(ImagePlane::to_tensor).collect();
        Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
    }

    fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let mut lr = Vec::with_capacity(size);
        let mut hr = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.random_range(0..self.len());
            let tag = if self.augment {
                Augment::ALL[rng.random_range(0..Augment::ALL.len())]
            } else {
                Augment::Identity
            };
            lr.push(augment(&self.lr[i], tag).to_tensor());
            hr.push(augment(&self.hr[i], tag).to_tensor());
        }
        Ok((Tensor::stack(&lr)?, Tensor::stack(&hr)?))
    }
}

/// Reads the manifest and cuts every image into aligned patch pairs.
pub fn load_training_set(config: &TrainConfig) -> Result<PatchSet> {
    let manifest = config
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::config("data.manifest is not set"))?;
    let mut set = PatchSet::new(config.generator.scale);
    for path in read_manifest(manifest)? {
        let img = load_image(&path)?.to_rgb()?;
        set.extend(crop_patches(
            &img,
            &path.to_string_lossy(),
            config.data.patch_size,
            config.data.stride,
            config.generator.scale,
            config.data.antialias,
        )?)?;
    }
    if set.is_empty() {
        return Err(Error::config(format!(
            "{} yields no training patches",
            manifest.display()
        )));
    }
    Ok(set)
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub stage: u8,
    pub lr: f64,
    /// Pixel term: Charbonnier in stage one, L1 in stage two.
    pub pixel: f64,
    pub generator: LossValues,
    pub disc_pixel: Option<f64>,
    pub disc_feature: Option<f64>,
    /// Extremes of the generator output before clipping.
    pub output_min: f64,
    pub output_max: f64,
}

impl StepReport {
    pub fn log_line(&self) -> String {
        format!(
            "iter={} stage={} loss_total={:.6e} loss_charb={:.6e} loss_perc={:.6e} loss_advP={:.6e} loss_advF={:.6e} lr={:.6e}",
            self.iteration,
            self.stage,
            self.generator.total,
            self.pixel,
            self.generator.perceptual,
            self.generator.adv_pixel,
            self.generator.adv_feature,
            self.lr
        )
    }

    /// Every loss this iteration produced, in a fixed order.
    pub fn losses(&self) -> Vec<f64> {
        let g = &self.generator;
        let mut v = vec![g.total, self.pixel, g.perceptual, g.adv_pixel, g.adv_feature];
        v.extend(self.disc_pixel);
        v.extend(self.disc_feature);
        v
    }
}

/// Critics, the fixed extractor and their optimizers.
#[derive(Clone, Debug)]
struct Critics {
    pixel: Discriminator,
    feature: Discriminator,
    extractor: FeatureExtractor,
    opt_pixel: Adam,
    opt_feature: Adam,
}

/// Fails unless every gradient belongs to parameters under `prefix`.
fn expect_scope(grads: &BTreeMap<String, Tensor>, prefix: &str, during: &str) -> Result<()> {
    let p = format!("{prefix}.");
    match grads.keys().find(|k| !k.starts_with(&p)) {
        Some(stray) => Err(Error::contract(format!(
            "gradient reached `{stray}` during the {during} update"
        ))),
        None if grads.is_empty() => Err(Error::contract(format!(
            "the {during} update produced no gradients"
        ))),
        None => Ok(()),
    }
}

fn seed_offset(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    weights: LossWeights,
    charbonnier: CharbonnierParams,
    generator: Generator,
    opt_generator: Adam,
    critics: Option<Critics>,
    iteration: u64,
    rng: ChaCha8Rng,
    data: TrainingData,
}

impl Trainer {
    /// Fresh run. Stage two reads its generator from `config.init_checkpoint`.
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        if config.stage == 2 {
            let path = config.init_checkpoint.clone().expect("validated");
            let init = Checkpoint::read(&path)?;
            return Trainer::with_init(config, data, &init);
        }
        let g = Generator::build(config.generator_spec(), config.seed, config.generator.init_scale)?;
        Trainer::assemble(config, data, g, None)
    }

    /// Fresh stage-two run starting from the generator stored in `init`.
    pub fn with_init(config: TrainConfig, data: TrainingData, init: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let g = Generator::from_params(config.generator_spec(), &init.params_with_prefix(generator::PREFIX))
            .map_err(|e| Error::config(format!("stage-1 checkpoint does not fit the generator spec: {e}")))?;
        Trainer::assemble(config, data, g, None)
    }

    /// Continues the run saved in `ckpt`. The config must describe the same
    /// trajectory; only run length, output and cadence may differ.
    pub fn resume(config: TrainConfig, data: TrainingData, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.stage != config.stage {
            return Err(Error::config(format!(
                "checkpoint is from stage {} but the config is for stage {}",
                ckpt.stage, config.stage
            )));
        }
        if ckpt.config_hash != config.trajectory_hash() {
            return Err(Error::config(
                "checkpoint was written under a different training config",
            ));
        }
        let g = Generator::from_params(config.generator_spec(), &ckpt.params_with_prefix(generator::PREFIX))?;
        let mut t = Trainer::assemble(config, data, g, Some(ckpt))?;
        let state = |group: &str| {
            ckpt.optimizers
                .get(group)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("no optimizer state for `{group}`")))
        };
        t.opt_generator.state = state(generator::PREFIX)?;
        if let Some(c) = t.critics.as_mut() {
            c.opt_pixel.state = state(c.pixel.spec.kind.prefix())?;
            c.opt_feature.state = state(c.feature.spec.kind.prefix())?;
        }
        t.iteration = ckpt.iteration;
        t.rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        t.rng.set_stream(DATA_STREAM);
        t.rng.set_word_pos(ckpt.rng.word_pos);
        Ok(t)
    }

    fn assemble(config: TrainConfig, data: TrainingData, generator: Generator, saved: Option<&Checkpoint>) -> Result<Self> {
        let adam = Adam::new(AdamConfig {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        });
        let critics = if config.stage == 2 {
            let mut pixel = Discriminator::build(config.pixel_spec(), seed_offset(config.seed, 1))?;
            let mut feature = Discriminator::build(config.feature_spec(), seed_offset(config.seed, 2))?;
            let mut extractor = FeatureExtractor::build(config.extractor_spec().clone(), seed_offset(config.seed, 3))?;
            match saved {
                Some(ckpt) => {
                    pixel.params.load_values(&ckpt.params_with_prefix(pixel.spec.kind.prefix()))?;
                    feature.params.load_values(&ckpt.params_with_prefix(feature.spec.kind.prefix()))?;
                    extractor.load_weights(&ckpt.params_with_prefix(crate::discriminators::EXTRACTOR_PREFIX))?;
                }
                None => {
                    if let Some(w) = &config.extractor.weights {
                        extractor.load_weights_file(w)?;
                    }
                }
            }
            Some(Critics {
                pixel,
                feature,
                extractor,
                opt_pixel: adam.clone(),
                opt_feature: adam.clone(),
            })
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Trainer {
            weights: config.effective_weights()?,
            charbonnier: config.charbonnier()?,
            config,
            generator,
            opt_generator: adam,
            critics,
            iteration: 0,
            rng,
            data,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.iteration + 1;
        let lr = lr_at(it, &self.config);
        let (lr_batch, hr_batch) = self.data.batch(self.config.batch_size, &mut self.rng)?;
        let mut report = if self.critics.is_some() {
            self.step_adversarial(&lr_batch, &hr_batch, lr)?
        } else {
            self.step_reconstruction(&lr_batch, &hr_batch, lr)?
        };
        report.iteration = it;
        self.iteration = it;
        Ok(report)
    }

    fn step_reconstruction(&mut self, lr_batch: &Tensor, hr_batch: &Tensor, lr: f64) -> Result<StepReport> {
        let mut tape = Tape::new();
        let x = tape.constant(lr_batch.clone())?;
        let sr = self.generator.forward(&mut tape, x)?;
        let hr = tape.constant(hr_batch.clone())?;
        let loss = charbonnier_loss(&mut tape, sr, hr, self.charbonnier)?;
        let grads = tape.backward(loss)?.into_params();
        expect_scope(&grads, generator::PREFIX, "generator")?;
        self.opt_generator.step(&mut self.generator.params, &grads, lr)?;
        let value = tape.value(loss).item()?;
        let out = tape.value(sr);
        Ok(StepReport {
            iteration: 0,
            stage: 1,
            lr,
            pixel: value,
            generator: LossValues {
                total: value,
                ..Default::default()
            },
            disc_pixel: None,
            disc_feature: None,
            output_min: out.data().iter().copied().fold(f64::INFINITY, f64::min),
            output_max: out.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    fn step_adversarial(&mut self, lr_batch: &Tensor, hr_batch: &Tensor, lr: f64) -> Result<StepReport> {
        let critics = self.critics.as_mut().expect("stage two has critics");
        let mut gt = Tape::new();
        let x = gt.constant(lr_batch.clone())?;
        let sr = self.generator.forward(&mut gt, x)?;
        let fake = gt.value(sr).clone();

        let mut disc_pixel = None;
        let mut disc_feature = None;
        for _ in 0..self.config.d_steps_per_g {
            let mut t = Tape::new();
            let real = t.constant(hr_batch.clone())?;
            let gen = t.constant(fake.clone())?;
            let sr_ = critics.pixel.forward(&mut t, real)?;
            let sf = critics.pixel.forward(&mut t, gen)?;
            let loss = adv_loss_discriminator(&mut t, sr_, sf)?;
            let grads = t.backward(loss)?.into_params();
            expect_scope(&grads, critics.pixel.spec.kind.prefix(), "pixel critic")?;
            critics.opt_pixel.step(&mut critics.pixel.params, &grads, lr)?;
            disc_pixel = Some(t.value(loss).item()?);

            let mut t = Tape::new();
            let real = t.constant(hr_batch.clone())?;
            let gen = t.constant(fake.clone())?;
            let fr = critics.extractor.forward(&mut t, real)?;
            let ff = critics.extractor.forward(&mut t, gen)?;
            let sr_ = critics.feature.forward(&mut t, fr)?;
            let sf = critics.feature.forward(&mut t, ff)?;
            let loss = adv_loss_discriminator(&mut t, sr_, sf)?;
            let grads = t.backward(loss)?.into_params();
            expect_scope(&grads, critics.feature.spec.kind.prefix(), "feature critic")?;
            critics.opt_feature.step(&mut critics.feature.params, &grads, lr)?;
            disc_feature = Some(t.value(loss).item()?);
        }

        let pixel = critics.pixel.frozen();
        let feature = critics.feature.frozen();
        let hr = gt.constant(hr_batch.clone())?;
        let fs = critics.extractor.forward(&mut gt, sr)?;
        let fh = critics.extractor.forward(&mut gt, hr)?;
        let perceptual = feature_distance(&mut gt, fs, fh, self.config.perceptual_distance)?;
        let l1 = l1_loss(&mut gt, sr, hr)?;
        let real_p = pixel.forward(&mut gt, hr)?;
        let fake_p = pixel.forward(&mut gt, sr)?;
        let adv_pixel = adv_loss_generator(&mut gt, real_p, fake_p)?;
        let real_f = feature.forward(&mut gt, fh)?;
        let fake_f = feature.forward(&mut gt, fs)?;
        let adv_feature = adv_loss_generator(&mut gt, real_f, fake_f)?;
        let terms = GeneratorTerms {
            perceptual,
            l1,
            adv_pixel: Some(adv_pixel),
            adv_feature: Some(adv_feature),
        };
        let (total, values) = total_generator_loss(&mut gt, &self.weights, &terms)?;
        let grads = gt.backward(total)?.into_params();
        expect_scope(&grads, generator::PREFIX, "generator")?;
        self.opt_generator.step(&mut self.generator.params, &grads, lr)?;

        Ok(StepReport {
            iteration: 0,
            stage: 2,
            lr,
            pixel: values.l1,
            generator: values,
            disc_pixel,
            disc_feature,
            output_min: fake.data().iter().copied().fold(f64::INFINITY, f64::min),
            output_max: fake.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// Full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        let mut add = |store: &ParamStore| {
            for (name, p) in store.iter() {
                if p.frozen {
                    params.insert_frozen(name, p.tensor.clone());
                } else {
                    params.insert(name, p.tensor.clone());
                }
            }
        };
        add(&self.generator.params);
        let mut optimizers = BTreeMap::from([(generator::PREFIX.to_owned(), self.opt_generator.state.clone())]);
        if let Some(c) = &self.critics {
            add(&c.pixel.params);
            add(&c.feature.params);
            add(&c.extractor.params);
            optimizers.insert(c.pixel.spec.kind.prefix().to_owned(), c.opt_pixel.state.clone());
            optimizers.insert(c.feature.spec.kind.prefix().to_owned(), c.opt_feature.state.clone());
        }
        Checkpoint {
            stage: self.config.stage,
            iteration: self.iteration,
            params,
            optimizers,
            rng: RngState {
                seed: self.config.seed,
                word_pos: self.rng.get_word_pos(),
            },
            config_toml: self.config.to_toml(),
            config_hash: self.config.trajectory_hash(),
        }
    }

    /// Steps until `config.iterations`, handing every report to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// Mean Charbonnier penalty over every training pair, unaugmented.
    pub fn training_set_charbonnier(&self) -> Result<f64> {
        let (lr, hr) = self.data.all()?;
        let sr = self.generator.infer(&lr)?;
        let mut tape = Tape::new();
        let a = tape.constant(sr)?;
        let b = tape.constant(hr)?;
        let l = charbonnier_loss(&mut tape, a, b, self.charbonnier)?;
        tape.value(l).item()
    }
}

/// Name of the periodic checkpoint written after `iteration`.
pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:08}.posr"))
}

pub const FINAL_CHECKPOINT: &str = "final.posr";
pub const LOG_FILE: &str = "train.log";

/// Runs `trainer` to completion, writing log lines to `train.log` and
/// checkpoints to the output directory. Returns the final checkpoint.
pub fn train(mut trainer: Trainer) -> Result<Checkpoint> {
    let dir = trainer.config().output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let w = trainer.weights();
    let header = format!(
        "stage={} start={} weights=({}, {}, {}) batch={} iterations={}",
        trainer.config().stage,
        trainer.iteration(),
        w.lambda,
        w.eta_pixel,
        w.eta_feature,
        trainer.config().batch_size,
        trainer.config().iterations
    );
    log::info!("{header}");
    writeln!(log_file, "{header}").map_err(|e| Error::io(&log_path, e))?;
    let (every, ckpt_every, last) = (
        trainer.config().log_every,
        trainer.config().checkpoint_every,
        trainer.config().iterations,
    );
    trainer.run(|t, r| {
        if r.iteration % every == 0 || r.iteration == 1 || r.iteration == last {
            let line = r.log_line();
            log::info!("{line}");
            write_line(&mut log_file, &log_path, &line)?;
            if let (Some(p), Some(f)) = (r.disc_pixel, r.disc_feature) {
                let line = format!("iter={} stage=2 loss_dP={p:.6e} loss_dF={f:.6e}", r.iteration);
                log::debug!("{line}");
                write_line(&mut log_file, &log_path, &line)?;
            }
        }
        if ckpt_every > 0 && r.iteration % ckpt_every == 0 && r.iteration != last {
            t.checkpoint().write(&checkpoint_path(&dir, r.iteration))?;
        }
        Ok(())
    })?;
    let ckpt = trainer.checkpoint();
    ckpt.write(&dir.join(FINAL_CHECKPOINT))?;
    Ok(ckpt)
}

fn write_line(f: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
