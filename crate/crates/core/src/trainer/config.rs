use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::RcabSpec;
use crate::data::patches::{DEFAULT_PATCH, DEFAULT_STRIDE};
use crate::discriminators::{DiscriminatorSpec, FeatureExtractorSpec};
use crate::generator::GeneratorSpec;
use crate::losses::{CharbonnierParams, LossWeights, PerceptualDistance};
use crate::error::{Error, Result};

/// How `lr_halving_points` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalvingMode {
    /// Each entry is the distance from the previous halving.
    #[default]
    Cumulative,
    /// Each entry is an iteration number.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub share_parameters: bool,
    pub use_attention: bool,
    pub reduction: usize,
    /// Multiplier on the fan-in initialization.
    pub init_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_blocks: 128,
            channels: 64,
            scale: 4,
            share_parameters: true,
            use_attention: true,
            reduction: 16,
            init_scale: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            num_blocks: self.num_blocks,
            channels: self.channels,
            scale: self.scale,
            block: RcabSpec {
                share_parameters: self.share_parameters,
                use_attention: self.use_attention,
                reduction: self.reduction,
                ..RcabSpec::new(self.channels)
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub max_channels: usize,
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            max_channels: 512,
            hidden: 1024,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    #[serde(flatten)]
    pub spec: FeatureExtractorSpec,
    /// Parameter file replacing the seeded weights.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub patch_size: usize,
    pub stride: usize,
    pub antialias: bool,
    /// Draw a random dihedral augmentation per sample.
    pub augment: bool,
    /// Round degraded inputs to 8-bit levels.
    pub quantize_lr: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            patch_size: DEFAULT_PATCH,
            stride: DEFAULT_STRIDE,
            antialias: true,
            augment: true,
            quantize_lr: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_halving_points: Vec<u64>,
    pub halving_mode: HalvingMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Discriminator updates per generator update in stage two.
    pub d_steps_per_g: usize,
    pub charbonnier_eps: f64,
    pub perceptual_distance: PerceptualDistance,
    /// Loss-weight preset; overrides `weights` when set.
    pub region: Option<u8>,
    pub weights: LossWeights,
    /// Stage-one checkpoint the stage-two generator starts from.
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub generator: GeneratorConfig,
    pub disc_pixel: DiscriminatorConfig,
    pub disc_feature: DiscriminatorConfig,
    pub extractor: ExtractorConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            iterations: 24_000_000,
            batch_size: 4,
            lr_initial: 5e-5,
            lr_halving_points: vec![14_400_000, 4_800_000, 4_800_000],
            halving_mode: HalvingMode::Cumulative,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            d_steps_per_g: 1,
            charbonnier_eps: 1e-3,
            perceptual_distance: PerceptualDistance::Squared,
            region: None,
            weights: LossWeights::default(),
            init_checkpoint: None,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 10_000,
            log_every: 100,
            generator: GeneratorConfig::default(),
            disc_pixel: DiscriminatorConfig::default(),
            disc_feature: DiscriminatorConfig::default(),
            extractor: ExtractorConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Sets a dotted key (`generator.channels`, `data.manifest`, …) from its
    /// textual value. The value is read as TOML and falls back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_owned()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{key}` does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_owned(), parsed.clone());
                break;
            }
            node = table
                .entry((*part).to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("setting `{key}`: {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Loss weights after applying the region preset.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        match self.region {
            Some(r) => LossWeights::for_region(r),
            None => Ok(self.weights),
        }
    }

    pub fn charbonnier(&self) -> Result<CharbonnierParams> {
        CharbonnierParams::new(self.charbonnier_eps)
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        self.generator.spec()
    }

    pub fn extractor_spec(&self) -> &FeatureExtractorSpec {
        &self.extractor.spec
    }

    pub fn pixel_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            max_channels: self.disc_pixel.max_channels,
            ..DiscriminatorSpec::pixel(self.disc_pixel.base_channels, self.data.patch_size)
                .with_hidden(self.disc_pixel.hidden)
        }
    }

    pub fn feature_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            max_channels: self.disc_feature.max_channels,
            ..DiscriminatorSpec::feature(self.extractor.spec.out_channels(), self.disc_feature.base_channels)
                .with_hidden(self.disc_feature.hidden)
        }
    }

    /// Halving iterations as absolute iteration numbers.
    pub fn halving_iterations(&self) -> Vec<u64> {
        match self.halving_mode {
            HalvingMode::Absolute => self.lr_halving_points.clone(),
            HalvingMode::Cumulative => self
                .lr_halving_points
                .iter()
                .scan(0u64, |acc, &d| {
                    *acc = acc.saturating_add(d);
                    Some(*acc)
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::config("lr_initial must be positive"));
        }
        let points = self.halving_iterations();
        let mut prev = 0;
        for &p in &points {
            if p <= prev {
                return Err(Error::config(format!(
                    "halving points {points:?} must be positive and strictly increasing"
                )));
            }
            prev = p;
        }
        let betas_ok = [self.adam_beta1, self.adam_beta2]
            .iter()
            .all(|b| (0.0..1.0).contains(b));
        if !betas_ok || !(self.adam_eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        self.charbonnier()?;
        self.effective_weights()?.validate()?;
        if self.stage == 1 && self.region.is_some() {
            return Err(Error::config("region presets apply to stage 2 only"));
        }
        if self.stage == 2 && self.init_checkpoint.is_none() {
            return Err(Error::config(
                "stage 2 needs a stage-1 checkpoint (init_checkpoint)",
            ));
        }
        self.generator_spec().validate()?;
        let p = self.data.patch_size;
        let s = self.generator.scale;
        if p == 0 || p % s != 0 {
            return Err(Error::config(format!(
                "patch_size {p} must be a positive multiple of the scale {s}"
            )));
        }
        if self.stage == 2 {
            self.extractor.spec.validate()?;
            self.pixel_spec().validate()?;
            self.feature_spec().validate()?;
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }

    /// Hash of every field that shapes the training trajectory. Run length,
    /// output location and logging cadence are left out so a resumed run
    /// may extend or relocate the original.
    pub fn trajectory_hash(&self) -> String {
        let canonical = TrainConfig {
            iterations: 0,
            output_dir: PathBuf::new(),
            checkpoint_every: 0,
            log_every: 1,
            init_checkpoint: None,
            data: DataConfig {
                manifest: None,
                ..self.data.clone()
            },
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
