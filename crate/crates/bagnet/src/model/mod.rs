//! The two-branch guidance network: configuration, parameters and wiring.
//!
//! Architecture summary:
//! * a full-resolution branch of 8 conv layers (32 kernels each) that never
//!   changes spatial size,
//! * a multi-scale encoder-decoder branch of 9 conv layers (64 kernels each)
//!   with four 2x2 poolings after stages 1-4 and four unpoolings before
//!   stages 6-9,
//! * eight bidirectional guidance blocks, one after each paired stage, that
//!   cross-calibrate the branches with single-channel attention maps,
//! * one 3x3 stem conv per branch in front, and a 1x1 sigmoid head over the
//!   concatenated branch outputs at the end.
//!
//! Every conv is 3x3/pad 1 or 1x1/pad 0, stride 1, so spatial sizes are set
//! purely by the pool/unpool schedule.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use forward::{bagnet_forward, bgb_forward, BgbOutputs, ForwardPass, Hooks, Mode, ModelVars};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RunningMoments, Scalar, Shape, Tensor};

/// Architecture constants. The defaults are the published network; the
/// channel widths can be shrunk for fast gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagnetConfig {
    pub full_scale_depth: usize,
    pub multi_scale_depth: usize,
    pub full_scale_channels: usize,
    pub multi_scale_channels: usize,
    pub n_bgb: usize,
    pub n_down: usize,
    pub n_up: usize,
    pub input_channels: usize,
    /// `(h, w)` the harness trains and evaluates at; both divisible by 16.
    pub input_size: (usize, usize),
}

impl Default for BagnetConfig {
    fn default() -> Self {
        BagnetConfig {
            full_scale_depth: 8,
            multi_scale_depth: 9,
            full_scale_channels: 32,
            multi_scale_channels: 64,
            n_bgb: 8,
            n_down: 4,
            n_up: 4,
            input_channels: 1,
            input_size: (64, 64),
        }
    }
}

impl BagnetConfig {
    /// Narrow configuration (4/8 channels, 16x16 input) for gradient checks;
    /// depth and block structure are unchanged.
    pub fn tiny() -> Self {
        BagnetConfig {
            full_scale_channels: 4,
            multi_scale_channels: 8,
            input_size: (16, 16),
            ..BagnetConfig::default()
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down != 4 || self.n_up != 4 {
            return Err(Error::Config(format!(
                "expected 4 down-sampling and 4 up-sampling stages, got {}/{}",
                self.n_down, self.n_up
            )));
        }
        if self.multi_scale_depth != self.n_down + 1 + self.n_up {
            return Err(Error::Config(format!(
                "multi_scale_depth must be n_down + 1 + n_up = {}, got {}",
                self.n_down + 1 + self.n_up,
                self.multi_scale_depth
            )));
        }
        if self.n_bgb != self.full_scale_depth || self.n_bgb != self.multi_scale_depth - 1 {
            return Err(Error::Config(format!(
                "n_bgb must equal full_scale_depth and multi_scale_depth - 1, got {}/{}/{}",
                self.n_bgb, self.full_scale_depth, self.multi_scale_depth
            )));
        }
        if self.full_scale_channels == 0 || self.multi_scale_channels == 0 || self.input_channels == 0
        {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        let div = self.pool_factor();
        let (h, w) = self.input_size;
        if !h.is_multiple_of(div) || !w.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {div}"
            )));
        }
        Ok(())
    }

    /// Total spatial reduction at the bottleneck, `2^n_down`.
    pub fn pool_factor(&self) -> usize {
        1 << self.n_down
    }

    /// Resolution factor exponent per multi-scale stage: `(0,1,2,3,4,3,2,1,0)`.
    pub fn scale_schedule(&self) -> Vec<usize> {
        let mut d: Vec<usize> = (0..=self.n_down).collect();
        d.extend((0..self.n_up).rev());
        d
    }

    /// Scale gap of each guidance block: the first `n_bgb` entries of the
    /// schedule, `(0,1,2,3,4,3,2,1)`.
    pub fn bgb_gaps(&self) -> Vec<usize> {
        self.scale_schedule()[..self.n_bgb].to_vec()
    }
}

/// One conv layer's parameters: `(c_out, c_in, k, k)` weights, per-channel
/// bias, and optionally the batch-norm scale/shift plus running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: Option<BatchNormParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningMoments<T>,
    pub eps: T,
    pub momentum: T,
}

/// Conventional batch-norm defaults.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameters of one bidirectional guidance block.
///
/// `fuse_*` are the 3x3 conv+BN fusions of the concatenated branch features;
/// `proj_*` are the bias-only 1x1 projections that squeeze one branch's
/// resampled features into the single-channel attention map gating the other.
#[derive(Clone, Debug, PartialEq)]
pub struct BgbParams<T> {
    /// 3x3, `full_c + multi_c -> multi_c`, with BN.
    pub fuse_multi: ConvParams<T>,
    /// 3x3, `full_c + multi_c -> full_c`, with BN.
    pub fuse_full: ConvParams<T>,
    /// 1x1, `full_c -> 1`, no BN; attention over the multi-scale features.
    pub proj_full: ConvParams<T>,
    /// 1x1, `multi_c -> 1`, no BN; attention over the full-scale features.
    pub proj_multi: ConvParams<T>,
}

/// All learnable state of the network plus the batch-norm running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: BagnetConfig,
    pub stem_full: ConvParams<T>,
    pub stem_multi: ConvParams<T>,
    pub full_layers: Vec<ConvParams<T>>,
    pub ms_layers: Vec<ConvParams<T>>,
    pub bgbs: Vec<BgbParams<T>>,
    pub head: ConvParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvSpec {
    c_in: usize,
    c_out: usize,
    k: usize,
    norm: bool,
}

impl ConvSpec {
    fn learnable(&self) -> usize {
        let mut n = self.c_out * self.c_in * self.k * self.k + self.c_out;
        if self.norm {
            n += 2 * self.c_out;
        }
        n
    }
}

/// Conv layers in declaration order. This single table drives parameter
/// initialization, counting, flattening and the checkpoint layout.
fn conv_specs(config: &BagnetConfig) -> Vec<ConvSpec> {
    let fc = config.full_scale_channels;
    let mc = config.multi_scale_channels;
    let cat = fc + mc;
    let mut specs = vec![
        ConvSpec { c_in: config.input_channels, c_out: fc, k: 3, norm: true }, // stem_full
        ConvSpec { c_in: config.input_channels, c_out: mc, k: 3, norm: true }, // stem_multi
    ];
    specs.extend(std::iter::repeat_n(ConvSpec { c_in: fc, c_out: fc, k: 3, norm: true }, config.full_scale_depth));
    specs.extend(std::iter::repeat_n(ConvSpec { c_in: mc, c_out: mc, k: 3, norm: true }, config.multi_scale_depth));
    for _ in 0..config.n_bgb {
        specs.push(ConvSpec { c_in: cat, c_out: mc, k: 3, norm: true }); // fuse_multi
        specs.push(ConvSpec { c_in: cat, c_out: fc, k: 3, norm: true }); // fuse_full
        specs.push(ConvSpec { c_in: fc, c_out: 1, k: 1, norm: false }); // proj_full
        specs.push(ConvSpec { c_in: mc, c_out: 1, k: 1, norm: false }); // proj_multi
    }
    specs.push(ConvSpec { c_in: cat, c_out: 1, k: 1, norm: false }); // head
    specs
}

/// Exact number of learnable scalars (conv weights and biases plus BN
/// scale/shift) for a configuration.
pub fn param_count(config: &BagnetConfig) -> usize {
    conv_specs(config).iter().map(ConvSpec::learnable).sum()
}

/// Flat parameter coordinates eligible for finite-difference checking.
///
/// Excludes the bias of every batch-normed conv: the normalization subtracts
/// the channel mean, so the loss is exactly invariant to those biases and
/// both sides of a difference quotient are pure rounding noise. They stay
/// learnable (and provably inert) but are not meaningful to compare.
pub fn grad_checkable_indices(config: &BagnetConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    for spec in conv_specs(config) {
        let w = spec.c_out * spec.c_in * spec.k * spec.k;
        out.extend(pos..pos + w);
        pos += w;
        if !spec.norm {
            out.extend(pos..pos + spec.c_out);
        }
        pos += spec.c_out;
        if spec.norm {
            out.extend(pos..pos + 2 * spec.c_out);
            pos += 2 * spec.c_out;
        }
    }
    debug_assert_eq!(pos, param_count(config));
    out
}

fn init_conv<T: Scalar>(spec: &ConvSpec, rng: &mut ChaCha12Rng) -> ConvParams<T> {
    let fan_in = spec.c_in * spec.k * spec.k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let wshape = Shape {
        n: spec.c_out,
        c: spec.c_in,
        h: spec.k,
        w: spec.k,
    };
    let weight = Tensor::new(
        wshape,
        (0..wshape.count())
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect(),
    )
    .expect("shape/data agree");
    let per_out = Shape { n: spec.c_out, c: 1, h: 1, w: 1 };
    ConvParams {
        weight,
        bias: Tensor::zeros(per_out),
        norm: spec.norm.then(|| BatchNormParams {
            gamma: Tensor::full(per_out, T::one()),
            beta: Tensor::zeros(per_out),
            running: RunningMoments::new(spec.c_out),
            eps: T::from_f64(BN_EPS),
            momentum: T::from_f64(BN_MOMENTUM),
        }),
    }
}

/// Fresh parameters: fan-in-scaled uniform conv weights, zero biases,
/// BN gamma 1 / beta 0, running moments at mean 0 / variance 1.
/// Bit-reproducible for a given seed.
pub fn init_params<T: Scalar>(config: &BagnetConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let specs = conv_specs(config);
    let mut it = specs.iter().map(|s| init_conv::<T>(s, &mut rng));
    // consumption order must match conv_specs
    let stem_full = it.next().unwrap();
    let stem_multi = it.next().unwrap();
    let full_layers: Vec<_> = (&mut it).take(config.full_scale_depth).collect();
    let ms_layers: Vec<_> = (&mut it).take(config.multi_scale_depth).collect();
    let bgbs: Vec<_> = (0..config.n_bgb)
        .map(|_| BgbParams {
            fuse_multi: it.next().unwrap(),
            fuse_full: it.next().unwrap(),
            proj_full: it.next().unwrap(),
            proj_multi: it.next().unwrap(),
        })
        .collect();
    let head = it.next().unwrap();
    assert!(it.next().is_none());
    Ok(ModelParams {
        config: *config,
        stem_full,
        stem_multi,
        full_layers,
        ms_layers,
        bgbs,
        head,
    })
}

impl<T: Scalar> ModelParams<T> {
    /// Conv layers in declaration order (the canonical ordering for
    /// flattening, checkpoints and optimizer state).
    pub fn convs(&self) -> Vec<&ConvParams<T>> {
        let mut v = vec![&self.stem_full, &self.stem_multi];
        v.extend(self.full_layers.iter());
        v.extend(self.ms_layers.iter());
        for b in &self.bgbs {
            v.push(&b.fuse_multi);
            v.push(&b.fuse_full);
            v.push(&b.proj_full);
            v.push(&b.proj_multi);
        }
        v.push(&self.head);
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut v: Vec<&mut ConvParams<T>> = vec![&mut self.stem_full, &mut self.stem_multi];
        v.extend(self.full_layers.iter_mut());
        v.extend(self.ms_layers.iter_mut());
        for b in &mut self.bgbs {
            v.push(&mut b.fuse_multi);
            v.push(&mut b.fuse_full);
            v.push(&mut b.proj_full);
            v.push(&mut b.proj_multi);
        }
        v.push(&mut self.head);
        v
    }

    /// Learnable scalars, flattened in declaration order (weight, bias,
    /// then gamma/beta per layer).
    pub fn flatten(&self) -> Vec<T> {
        let mut flat = Vec::with_capacity(param_count(&self.config));
        for conv in self.convs() {
            flat.extend_from_slice(conv.weight.data());
            flat.extend_from_slice(conv.bias.data());
            if let Some(norm) = &conv.norm {
                flat.extend_from_slice(norm.gamma.data());
                flat.extend_from_slice(norm.beta.data());
            }
        }
        flat
    }

    /// Overwrite all learnable scalars from a flat vector produced by
    /// [`ModelParams::flatten`]. Running moments are untouched.
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let expect = param_count(&self.config);
        if flat.len() != expect {
            return Err(Error::Config(format!(
                "flat parameter vector has {} entries, model needs {expect}",
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [T], flat: &[T]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for conv in self.convs_mut() {
            take(conv.weight.data_mut(), flat);
            take(conv.bias.data_mut(), flat);
            if let Some(norm) = &mut conv.norm {
                take(norm.gamma.data_mut(), flat);
                take(norm.beta.data_mut(), flat);
            }
        }
        debug_assert_eq!(pos, expect);
        Ok(())
    }

    /// Exact element-for-element precision change (used to promote f32
    /// parameters to f64 for gradient checking).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            norm: c.norm.as_ref().map(|n| BatchNormParams {
                gamma: n.gamma.cast(),
                beta: n.beta.cast(),
                running: RunningMoments {
                    mean: n.running.mean.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    var: n.running.var.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                },
                eps: U::from_f64(n.eps.as_f64()),
                momentum: U::from_f64(n.momentum.as_f64()),
            }),
        };
        ModelParams {
            config: self.config,
            stem_full: cast_conv(&self.stem_full),
            stem_multi: cast_conv(&self.stem_multi),
            full_layers: self.full_layers.iter().map(cast_conv).collect(),
            ms_layers: self.ms_layers.iter().map(cast_conv).collect(),
            bgbs: self
                .bgbs
                .iter()
                .map(|b| BgbParams {
                    fuse_multi: cast_conv(&b.fuse_multi),
                    fuse_full: cast_conv(&b.fuse_full),
                    proj_full: cast_conv(&b.proj_full),
                    proj_multi: cast_conv(&b.proj_multi),
                })
                .collect(),
            head: cast_conv(&self.head),
        }
    }
}
