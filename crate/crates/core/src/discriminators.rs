//! Pixel-domain and feature-domain critics, the frozen feature extractor
//! they share with the perceptual loss, and the relativistic-average
//! criterion.
//!
//! Both critics are stacks of 3×3 convolutions with LeakyReLU(0.2). Odd
//! blocks use stride 2 and double the width (capped at `max_channels`). The
//! pixel critic ends in two dense layers and therefore needs a fixed input
//! size; the feature critic ends in two 1×1 convolutions and a global
//! average, so it accepts any spatial size.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::ParameterCount;
use crate::engine::params::{conv_param_count, he_normal, init_conv};
use crate::engine::{ParamStore, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Pixel,
    Feature,
}

impl DiscriminatorKind {
    pub fn prefix(self) -> &'static str {
        match self {
            DiscriminatorKind::Pixel => "disc_pixel",
            DiscriminatorKind::Feature => "disc_feature",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorHead {
    FullyConnected,
    FullyConvolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub kind: DiscriminatorKind,
    pub in_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub num_blocks: usize,
    pub head: DiscriminatorHead,
    /// Width of the hidden head layer.
    pub hidden: usize,
    /// Square input extent the dense head was built for.
    pub input_size: usize,
}

impl DiscriminatorSpec {
    /// RGB critic with 8 blocks and a dense head.
    pub fn pixel(base_channels: usize, input_size: usize) -> Self {
        DiscriminatorSpec {
            kind: DiscriminatorKind::Pixel,
            in_channels: 3,
            base_channels,
            max_channels: 512,
            num_blocks: 8,
            head: DiscriminatorHead::FullyConnected,
            hidden: 1024,
            input_size,
        }
    }

    /// Feature-map critic with 7 blocks and a fully convolutional head.
    pub fn feature(in_channels: usize, base_channels: usize) -> Self {
        DiscriminatorSpec {
            kind: DiscriminatorKind::Feature,
            in_channels,
            base_channels,
            max_channels: 512,
            num_blocks: 7,
            head: DiscriminatorHead::FullyConvolutional,
            hidden: 1024,
            input_size: 0,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.hidden == 0 {
            return Err(Error::config("discriminator widths must be positive"));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::config("max_channels below base_channels"));
        }
        if self.head == DiscriminatorHead::FullyConnected && self.input_size == 0 {
            return Err(Error::config("a dense head needs a fixed input size"));
        }
        Ok(())
    }

    fn block_channels(&self, i: usize) -> usize {
        (self.base_channels << i.div_ceil(2).min(20)).min(self.max_channels)
    }

    fn block_stride(i: usize) -> usize {
        if i % 2 == 1 {
            2
        } else {
            1
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.num_blocks == 0 {
            self.base_channels
        } else {
            self.block_channels(self.num_blocks - 1)
        }
    }

    /// Spatial extent after the conv stack for an input of extent `size`.
    pub fn reduced_extent(&self, size: usize) -> usize {
        (0..self.num_blocks).fold(size, |s, i| {
            if Self::block_stride(i) == 2 {
                s.div_ceil(2)
            } else {
                s
            }
        })
    }

    fn dense_inputs(&self) -> usize {
        let e = self.reduced_extent(self.input_size);
        self.out_channels() * e * e
    }
}

impl ParameterCount for DiscriminatorSpec {
    fn parameter_count(&self) -> usize {
        let mut total = conv_param_count(self.in_channels, self.base_channels, 3);
        let mut c = self.base_channels;
        for i in 0..self.num_blocks {
            let o = self.block_channels(i);
            total += conv_param_count(c, o, 3);
            c = o;
        }
        total
            + match self.head {
                DiscriminatorHead::FullyConnected => {
                    self.dense_inputs() * self.hidden + self.hidden + self.hidden + 1
                }
                DiscriminatorHead::FullyConvolutional => {
                    conv_param_count(c, self.hidden, 1) + conv_param_count(self.hidden, 1, 1)
                }
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn build(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let p = spec.kind.prefix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_conv(&mut store, &format!("{p}.stem"), spec.in_channels, spec.base_channels, 3, 1.0, &mut rng);
        let mut c = spec.base_channels;
        for i in 0..spec.num_blocks {
            let o = spec.block_channels(i);
            init_conv(&mut store, &format!("{p}.blocks.{i}"), c, o, 3, 1.0, &mut rng);
            c = o;
        }
        match spec.head {
            DiscriminatorHead::FullyConnected => {
                let f = spec.dense_inputs();
                let h = spec.hidden;
                store.insert(format!("{p}.fc1.weight"), he_normal(Shape::new(h, f, 1, 1), f, 1.0, &mut rng));
                store.insert(format!("{p}.fc1.bias"), Tensor::zeros(Shape::new(h, 1, 1, 1)));
                store.insert(format!("{p}.fc2.weight"), he_normal(Shape::new(1, h, 1, 1), h, 1.0, &mut rng));
                store.insert(format!("{p}.fc2.bias"), Tensor::zeros(Shape::new(1, 1, 1, 1)));
            }
            DiscriminatorHead::FullyConvolutional => {
                init_conv(&mut store, &format!("{p}.head1"), c, spec.hidden, 1, 1.0, &mut rng);
                init_conv(&mut store, &format!("{p}.head2"), spec.hidden, 1, 1, 1.0, &mut rng);
            }
        }
        Ok(Discriminator {
            spec,
            params: store,
        })
    }

    fn prefix(&self) -> &'static str {
        self.spec.kind.prefix()
    }

    fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let p = self.prefix();
        let w = tape.param(&self.params, &format!("{p}.{name}.weight"))?;
        let b = tape.param(&self.params, &format!("{p}.{name}.bias"))?;
        tape.conv2d(x, w, Some(b), stride, pad)
    }

    /// Raw (pre-sigmoid) score per sample, shape `[N, 1, 1, 1]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let spec = &self.spec;
        if s.c != spec.in_channels {
            return Err(Error::dimension(format!(
                "discriminator expects {} input channels, got {s}",
                spec.in_channels
            )));
        }
        if spec.head == DiscriminatorHead::FullyConnected
            && (s.h != spec.input_size || s.w != spec.input_size)
        {
            return Err(Error::dimension(format!(
                "dense-head discriminator was built for {0}×{0} inputs, got {s}",
                spec.input_size
            )));
        }
        let mut h = self.conv(tape, "stem", x, 1, 1)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        for i in 0..spec.num_blocks {
            h = self.conv(tape, &format!("blocks.{i}"), h, DiscriminatorSpec::block_stride(i), 1)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let p = self.prefix();
        match spec.head {
            DiscriminatorHead::FullyConnected => {
                let w1 = tape.param(&self.params, &format!("{p}.fc1.weight"))?;
                let b1 = tape.param(&self.params, &format!("{p}.fc1.bias"))?;
                h = tape.fully_connected(h, w1, Some(b1))?;
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                let w2 = tape.param(&self.params, &format!("{p}.fc2.weight"))?;
                let b2 = tape.param(&self.params, &format!("{p}.fc2.bias"))?;
                tape.fully_connected(h, w2, Some(b2))
            }
            DiscriminatorHead::FullyConvolutional => {
                h = self.conv(tape, "head1", h, 1, 0)?;
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                h = self.conv(tape, "head2", h, 1, 0)?;
                tape.global_avg_pool(h)
            }
        }
    }

    /// Copy whose parameters enter tapes as constants.
    pub fn frozen(&self) -> Discriminator {
        let mut d = self.clone();
        d.params.freeze_all();
        d
    }
}

/// Stage widths of the fixed feature extractor. The first stage keeps the
/// input resolution, every later stage halves it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    pub channels: Vec<usize>,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        FeatureExtractorSpec {
            channels: vec![16, 32, 64, 64],
        }
    }
}

impl FeatureExtractorSpec {
    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "feature extractor needs at least one stage of nonzero width",
            ));
        }
        Ok(())
    }
}

pub const EXTRACTOR_PREFIX: &str = "extractor";

/// Frozen convolutional feature extractor. Its parameters never receive
/// gradients, but gradients flow through it to its input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub spec: FeatureExtractorSpec,
    pub params: ParamStore,
}

impl FeatureExtractor {
    pub fn build(spec: FeatureExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut c = 3;
        for (i, &o) in spec.channels.iter().enumerate() {
            init_conv(&mut store, &format!("{EXTRACTOR_PREFIX}.stages.{i}"), c, o, 3, 1.0, &mut rng);
            c = o;
        }
        store.freeze_all();
        Ok(FeatureExtractor {
            spec,
            params: store,
        })
    }

    /// Replaces the seeded weights with externally supplied ones, matched
    /// by name and shape.
    pub fn load_weights(&mut self, weights: &ParamStore) -> Result<()> {
        self.params.load_values(weights)?;
        self.params.freeze_all();
        Ok(())
    }

    /// Loads weights from a parameter file in checkpoint format.
    pub fn load_weights_file(&mut self, path: &Path) -> Result<()> {
        let ckpt = crate::trainer::checkpoint::Checkpoint::read(path)?;
        self.load_weights(&ckpt.params)
    }

    /// Features taken from the last stage before its activation.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.c != 3 {
            return Err(Error::dimension(format!(
                "feature extractor expects RGB input, got {s}"
            )));
        }
        let mut h = image;
        let depth = self.spec.depth();
        for i in 0..depth {
            let w = tape.param_frozen(&self.params, &format!("{EXTRACTOR_PREFIX}.stages.{i}.weight"))?;
            let b = tape.param_frozen(&self.params, &format!("{EXTRACTOR_PREFIX}.stages.{i}.bias"))?;
            h = tape.conv2d(h, w, Some(b), if i == 0 { 1 } else { 2 }, 1)?;
            if i + 1 < depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// `σ(score_a − mean(scores_b))`, elementwise over `score_a`.
pub fn relativistic_criterion(tape: &mut Tape, score_a: Var, scores_b: Var) -> Result<Var> {
    if tape.value(scores_b).is_empty() {
        return Err(Error::contract(
            "relativistic criterion needs a non-empty opposing batch",
        ));
    }
    let mean = tape.mean_all(scores_b)?;
    let diff = tape.sub_scalar(score_a, mean)?;
    tape.sigmoid(diff)
}
