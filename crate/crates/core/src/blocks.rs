//! Residual channel attention block.
//!
//! A block runs `convs_per_block` 3×3 convolutions with ReLU between them,
//! gates the result per channel with a squeeze-and-excitation style
//! descriptor, and adds the block input back. With sharing enabled every
//! convolution application reads the same weight and bias, so the receptive
//! field grows while the parameter count stays that of a single layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::params::{conv_param_count, init_conv};
use crate::engine::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_REDUCTION: usize = 16;

/// Exact number of tunable scalars a spec describes. Shared weights count once.
pub trait ParameterCount {
    fn parameter_count(&self) -> usize;
}

pub fn count_parameters(spec: &impl ParameterCount) -> usize {
    spec.parameter_count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAttentionSpec {
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttentionSpec {
    pub fn new(channels: usize) -> Self {
        ChannelAttentionSpec {
            channels,
            reduction: DEFAULT_REDUCTION,
        }
    }

    /// Width of the squeeze layer, floored at one channel.
    pub fn bottleneck(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, gain: f64, rng: &mut impl Rng) {
        let b = self.bottleneck();
        init_conv(store, &format!("{prefix}.reduce"), self.channels, b, 1, gain, rng);
        init_conv(store, &format!("{prefix}.expand"), b, self.channels, 1, gain, rng);
    }

    /// Per-channel gates in (0, 1) for `x`, shape `[N, C, 1, 1]`.
    pub fn descriptor(&self, tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.channels {
            return Err(Error::dimension(format!(
                "channel attention expects {} channels, input is {s}",
                self.channels
            )));
        }
        let pooled = tape.global_avg_pool(x)?;
        let w1 = tape.param(store, &format!("{prefix}.reduce.weight"))?;
        let b1 = tape.param(store, &format!("{prefix}.reduce.bias"))?;
        let squeezed = tape.conv2d(pooled, w1, Some(b1), 1, 0)?;
        let squeezed = tape.relu(squeezed)?;
        let w2 = tape.param(store, &format!("{prefix}.expand.weight"))?;
        let b2 = tape.param(store, &format!("{prefix}.expand.bias"))?;
        let expanded = tape.conv2d(squeezed, w2, Some(b2), 1, 0)?;
        tape.sigmoid(expanded)
    }

    /// `descriptor(x) ⊗ x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let tau = self.descriptor(tape, store, prefix, x)?;
        tape.channel_mul(tau, x)
    }
}

impl ParameterCount for ChannelAttentionSpec {
    fn parameter_count(&self) -> usize {
        let b = self.bottleneck();
        conv_param_count(self.channels, b, 1) + conv_param_count(b, self.channels, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcabSpec {
    pub channels: usize,
    pub kernel: usize,
    pub convs_per_block: usize,
    pub share_parameters: bool,
    pub use_attention: bool,
    pub reduction: usize,
}

impl RcabSpec {
    pub fn new(channels: usize) -> Self {
        RcabSpec {
            channels,
            kernel: 3,
            convs_per_block: 2,
            share_parameters: true,
            use_attention: true,
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("block channels must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "block kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.convs_per_block == 0 || self.reduction == 0 {
            return Err(Error::config(
                "convs_per_block and reduction must be positive",
            ));
        }
        Ok(())
    }

    pub fn attention(&self) -> ChannelAttentionSpec {
        ChannelAttentionSpec {
            channels: self.channels,
            reduction: self.reduction,
        }
    }

    /// Parameter prefix of the `i`-th convolution application.
    fn conv_prefix(&self, prefix: &str, i: usize) -> String {
        if self.share_parameters {
            format!("{prefix}.conv")
        } else {
            format!("{prefix}.conv{i}")
        }
    }

    fn distinct_convs(&self) -> usize {
        if self.share_parameters {
            1
        } else {
            self.convs_per_block
        }
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, gain: f64, rng: &mut impl Rng) {
        for i in 0..self.distinct_convs() {
            let name = self.conv_prefix(prefix, i);
            init_conv(store, &name, self.channels, self.channels, self.kernel, gain, rng);
        }
        if self.use_attention {
            self.attention().init(store, &format!("{prefix}.ca"), gain, rng);
        }
    }

    /// `x + CA(conv(relu(conv(x))))`, generalized to `convs_per_block` convs.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.channels {
            return Err(Error::dimension(format!(
                "residual block expects {} channels, input is {s}",
                self.channels
            )));
        }
        let pad = self.kernel / 2;
        let mut h = x;
        for i in 0..self.convs_per_block {
            let name = self.conv_prefix(prefix, i);
            let w = tape.param(store, &format!("{name}.weight"))?;
            let b = tape.param(store, &format!("{name}.bias"))?;
            h = tape.conv2d(h, w, Some(b), 1, pad)?;
            if i + 1 < self.convs_per_block {
                h = tape.relu(h)?;
            }
        }
        if self.use_attention {
            h = self.attention().forward(tape, store, &format!("{prefix}.ca"), h)?;
        }
        tape.add(x, h)
    }
}

impl ParameterCount for RcabSpec {
    fn parameter_count(&self) -> usize {
        let conv = conv_param_count(self.channels, self.channels, self.kernel);
        let ca = if self.use_attention {
            self.attention().parameter_count()
        } else {
            0
        };
        self.distinct_convs() * conv + ca
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{finite_diff_check, GradCheckOptions, Shape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn zero_all(store: &mut ParamStore) {
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for n in names {
            store.tensor_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    fn run_block(spec: &RcabSpec, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = spec.forward(&mut tape, store, "b", xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn hand_counted_parameters() {
        let spec = RcabSpec::new(64);
        assert_eq!(3 * 3 * 64 * 64 + 64 + (64 * 4 + 4) + (4 * 64 + 64), 37_508);
        assert_eq!(count_parameters(&spec), 37_508);
        let unshared = RcabSpec {
            share_parameters: false,
            ..spec
        };
        assert_eq!(count_parameters(&unshared), 37_508 + 36_928);
        assert_eq!(count_parameters(&unshared), 74_436);
        let plain = RcabSpec {
            use_attention: false,
            ..spec
        };
        assert_eq!(count_parameters(&plain), 36_928);
    }

    #[test]
    fn count_matches_initialized_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for share in [true, false] {
            for attn in [true, false] {
                for c in [16, 32, 8] {
                    let spec = RcabSpec {
                        share_parameters: share,
                        use_attention: attn,
                        ..RcabSpec::new(c)
                    };
                    let mut store = ParamStore::new();
                    spec.init(&mut store, "b", 1.0, &mut rng);
                    assert_eq!(store.num_scalars(), count_parameters(&spec));
                }
            }
        }
    }

    #[test]
    fn bottleneck_floors_at_one() {
        assert_eq!(ChannelAttentionSpec::new(16).bottleneck(), 1);
        assert_eq!(ChannelAttentionSpec::new(8).bottleneck(), 1);
        assert_eq!(ChannelAttentionSpec::new(64).bottleneck(), 4);
    }

    #[test]
    fn zero_attention_halves_input() {
        let spec = ChannelAttentionSpec::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        spec.init(&mut store, "ca", 1.0, &mut rng);
        zero_all(&mut store);
        let x = random(Shape::new(2, 4, 3, 3), &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = spec.forward(&mut tape, &store, "ca", xv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn attention_channel_mismatch() {
        let spec = ChannelAttentionSpec::new(4);
        let mut store = ParamStore::new();
        spec.init(&mut store, "ca", 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 2, 2))).unwrap();
        assert!(matches!(
            spec.forward(&mut tape, &store, "ca", x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        // Two channels with identical planes; weights symmetric under swap.
        let spec = ChannelAttentionSpec {
            channels: 2,
            reduction: 1,
        };
        let mut store = ParamStore::new();
        store.insert("ca.reduce.weight", Tensor::new(Shape::new(2, 2, 1, 1), vec![0.3, -0.7, -0.7, 0.3]).unwrap());
        store.insert("ca.reduce.bias", Tensor::new(Shape::new(2, 1, 1, 1), vec![0.1, 0.1]).unwrap());
        store.insert("ca.expand.weight", Tensor::new(Shape::new(2, 2, 1, 1), vec![1.2, 0.4, 0.4, 1.2]).unwrap());
        store.insert("ca.expand.bias", Tensor::new(Shape::new(2, 1, 1, 1), vec![-0.2, -0.2]).unwrap());
        let plane = [0.5, -1.0, 2.0, 0.25];
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, _, h, w| plane[h * 2 + w]);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let tau = spec.descriptor(&mut tape, &store, "ca", xv).unwrap();
        let d = tape.value(tau).data();
        assert_eq!(d[0], d[1]);
        assert!(d[0] > 0.0 && d[0] < 1.0);
    }

    #[test]
    fn attention_gradient_check_c16() {
        let spec = ChannelAttentionSpec::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        spec.init(&mut store, "ca", 1.0, &mut rng);
        store.insert("x", random(Shape::new(2, 16, 3, 3), &mut rng));
        let proj = random(Shape::new(2, 16, 3, 3), &mut rng);
        let report = finite_diff_check(
            &store,
            |tape, s| {
                let x = tape.param(s, "x")?;
                let y = spec.forward(tape, s, "ca", x)?;
                let p = tape.constant(proj.clone())?;
                let z = tape.mul(y, p)?;
                tape.mean_all(z)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn zero_convs_give_identity() {
        let spec = RcabSpec::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        spec.init(&mut store, "b", 1.0, &mut rng);
        for n in ["b.conv.weight", "b.conv.bias", "b.ca.reduce.bias", "b.ca.expand.bias"] {
            store.tensor_mut(n).unwrap().data_mut().fill(0.0);
        }
        let x = random(Shape::new(2, 16, 5, 4), &mut rng);
        assert_eq!(run_block(&spec, &store, &x), x);
    }

    #[test]
    fn tied_and_untied_agree_forward() {
        let tied = RcabSpec::new(8);
        let untied = RcabSpec {
            share_parameters: false,
            ..tied
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ts = ParamStore::new();
        tied.init(&mut ts, "b", 1.0, &mut rng);
        let mut us = ParamStore::new();
        for (name, p) in ts.iter() {
            if let Some(rest) = name.strip_prefix("b.conv.") {
                us.insert(format!("b.conv0.{rest}"), p.tensor.clone());
                us.insert(format!("b.conv1.{rest}"), p.tensor.clone());
            } else {
                us.insert(name, p.tensor.clone());
            }
        }
        let x = random(Shape::new(1, 8, 6, 6), &mut rng);
        assert_eq!(run_block(&tied, &ts, &x), run_block(&untied, &us, &x));
        assert_eq!(
            count_parameters(&untied) - count_parameters(&tied),
            (tied.convs_per_block - 1) * (9 * 8 * 8 + 8)
        );

        // shared gradient = sum of the untied per-use gradients
        let proj = random(Shape::new(1, 8, 6, 6), &mut rng);
        let grads = |spec: &RcabSpec, store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let y = spec.forward(&mut tape, store, "b", xv).unwrap();
            let p = tape.constant(proj.clone()).unwrap();
            let z = tape.mul(y, p).unwrap();
            let l = tape.mean_all(z).unwrap();
            tape.backward(l).unwrap().into_params()
        };
        let gt = grads(&tied, &ts);
        let gu = grads(&untied, &us);
        for suffix in ["weight", "bias"] {
            let t = &gt[&format!("b.conv.{suffix}")];
            let a = &gu[&format!("b.conv0.{suffix}")];
            let b = &gu[&format!("b.conv1.{suffix}")];
            for ((t, a), b) in t.data().iter().zip(a.data()).zip(b.data()) {
                assert!((t - (a + b)).abs() <= 1e-12 * t.abs().max(1.0));
            }
        }
    }

    #[test]
    fn block_gradient_check() {
        for share in [true, false] {
            let spec = RcabSpec {
                share_parameters: share,
                ..RcabSpec::new(4)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut store = ParamStore::new();
            spec.init(&mut store, "b", 1.0, &mut rng);
            store.insert("x", random(Shape::new(2, 4, 4, 4), &mut rng));
            let proj = random(Shape::new(2, 4, 4, 4), &mut rng);
            let report = finite_diff_check(
                &store,
                |tape, s| {
                    let x = tape.param(s, "x")?;
                    let y = spec.forward(tape, s, "b", x)?;
                    let p = tape.constant(proj.clone())?;
                    let z = tape.mul(y, p)?;
                    tape.mean_all(z)
                },
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "share={share}: {:?}", report.worst());
        }
    }

    proptest! {
        #[test]
        fn attention_stage_never_amplifies(seed in 0u64..500) {
            let spec = ChannelAttentionSpec::new(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            spec.init(&mut store, "ca", 3.0, &mut rng);
            let x = random(Shape::new(1, 8, 3, 3), &mut rng);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let tau = spec.descriptor(&mut tape, &store, "ca", xv).unwrap();
            prop_assert!(tape.value(tau).data().iter().all(|&t| t > 0.0 && t < 1.0));
            let y = tape.channel_mul(tau, xv).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(x.data()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
