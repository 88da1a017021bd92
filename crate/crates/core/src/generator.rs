//! The super-resolution generator: a shallow 3×3 feature extractor, a
//! cascade of residual channel-attention blocks closed by a global skip,
//! and ×2 sub-pixel stages up to the requested scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ParameterCount, RcabSpec};
use crate::engine::params::{conv_param_count, init_conv};
use crate::engine::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PREFIX: &str = "generator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub num_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub block: RcabSpec,
}

impl GeneratorSpec {
    pub fn new(num_blocks: usize, channels: usize, scale: usize) -> Self {
        GeneratorSpec {
            num_blocks,
            channels,
            scale,
            block: RcabSpec::new(channels),
        }
    }

    /// 128 blocks, 64 channels, ×4.
    pub fn full() -> Self {
        GeneratorSpec::new(128, 64, 4)
    }

    pub fn with_sharing(mut self, share: bool) -> Self {
        self.block.share_parameters = share;
        self
    }

    pub fn with_attention(mut self, attention: bool) -> Self {
        self.block.use_attention = attention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.channels == 0 {
            return Err(Error::config("generator channels must be positive"));
        }
        if self.block.channels != self.channels {
            return Err(Error::config(format!(
                "block channels {} differ from generator channels {}",
                self.block.channels, self.channels
            )));
        }
        if !self.scale.is_power_of_two() {
            return Err(Error::config(format!(
                "scale must be a power of two, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Number of ×2 sub-pixel stages.
    pub fn upsample_stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }
}

impl ParameterCount for GeneratorSpec {
    fn parameter_count(&self) -> usize {
        let c = self.channels;
        let k = self.block.kernel;
        conv_param_count(3, c, k)
            + self.num_blocks * self.block.parameter_count()
            + conv_param_count(c, c, k)
            + self.upsample_stages() * conv_param_count(c, 4 * c, k)
            + conv_param_count(c, 3, k)
    }
}

/// A generator spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamStore,
}

impl Generator {
    /// Fan-in scaled Gaussian weights (times `init_scale`) and zero biases,
    /// drawn from a generator seeded with `seed`.
    pub fn build(spec: GeneratorSpec, seed: u64, init_scale: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, k) = (spec.channels, spec.block.kernel);
        init_conv(&mut store, &format!("{PREFIX}.head"), 3, c, k, init_scale, &mut rng);
        for i in 0..spec.num_blocks {
            spec.block
                .init(&mut store, &format!("{PREFIX}.blocks.{i}"), init_scale, &mut rng);
        }
        init_conv(&mut store, &format!("{PREFIX}.tail"), c, c, k, init_scale, &mut rng);
        for s in 0..spec.upsample_stages() {
            init_conv(&mut store, &format!("{PREFIX}.up.{s}"), c, 4 * c, k, init_scale, &mut rng);
        }
        init_conv(&mut store, &format!("{PREFIX}.out"), c, 3, k, init_scale, &mut rng);
        Ok(Generator {
            spec,
            params: store,
        })
    }

    /// Wraps existing parameters after checking names and shapes against
    /// a freshly built layout.
    pub fn from_params(spec: GeneratorSpec, params: &ParamStore) -> Result<Self> {
        let mut g = Generator::build(spec, 0, 1.0)?;
        g.params.load_values(params)?;
        Ok(g)
    }

    fn conv(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{PREFIX}.{name}.weight"))?;
        let b = tape.param(&self.params, &format!("{PREFIX}.{name}.bias"))?;
        tape.conv2d(x, w, Some(b), stride, self.spec.block.kernel / 2)
    }

    /// `[N, 3, H, W] → [N, 3, scale·H, scale·W]`, unclipped.
    pub fn forward(&self, tape: &mut Tape, lr: Var) -> Result<Var> {
        let s = tape.shape(lr);
        if s.c != 3 || s.h == 0 || s.w == 0 {
            return Err(Error::dimension(format!(
                "generator expects a non-empty [N, 3, H, W] input, got {s}"
            )));
        }
        let head = self.conv(tape, "head", lr, 1)?;
        let mut h = head;
        for i in 0..self.spec.num_blocks {
            h = self
                .spec
                .block
                .forward(tape, &self.params, &format!("{PREFIX}.blocks.{i}"), h)?;
        }
        let tail = self.conv(tape, "tail", h, 1)?;
        let mut h = tape.add(tail, head)?;
        for st in 0..self.spec.upsample_stages() {
            let expanded = self.conv(tape, &format!("up.{st}"), h, 1)?;
            h = tape.pixel_shuffle(expanded, 2)?;
        }
        self.conv(tape, "out", h, 1)
    }

    /// Forward pass on a detached tensor.
    pub fn infer(&self, lr: &Tensor) -> Result<Tensor> {
        if let Some(i) = lr.nan_scan() {
            return Err(Error::contract(format!(
                "generator input has a non-finite value at element {i}"
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(lr.clone())?;
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}
