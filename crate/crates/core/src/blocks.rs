//! Morphological residual block and the layer helpers shared with the network.
//!
//! Each pathway reduces its input with a 3³ convolution, squashes it through a
//! sigmoid, applies one morphological operator, optionally adds the
//! pre-sigmoid activation back, and projects with a second 3³ convolution.
//! Pathway outputs are concatenated along channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv::{check_odd_window, Padding};
use crate::morphology::{self, init_chm_kernel, Filter, MorphOp};
use crate::params::{conv_params, init_conv, join, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Floor applied after the sigmoid before any CHM operator.
pub const CHM_INPUT_FLOOR: f64 = 1e-7;
/// Lower bound for learnable CHM kernel entries after each optimizer step.
pub const CHM_KERNEL_FLOOR: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-5;
const BLOCK_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpImpl {
    NonLearnable,
    Chm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub op_impl: OpImpl,
    pub skip: bool,
    pub pathways: Vec<MorphOp>,
    pub window: [usize; 3],
    /// Width of each pathway's first convolution.
    pub reduce_channels: usize,
    pub leaky_slope: f64,
}

impl MorphBlockConfig {
    /// Four pathways, reduce width `out / 4`, slope 0.01.
    pub fn new(in_channels: usize, out_channels: usize, op_impl: OpImpl, skip: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            op_impl,
            skip,
            pathways: MorphOp::ALL.to_vec(),
            window: [3, 3, 3],
            reduce_channels: (out_channels / 4).max(1),
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.reduce_channels == 0 {
            return Err(Error::config("block channel counts must be positive"));
        }
        if self.pathways.is_empty() {
            return Err(Error::config("block needs at least one pathway"));
        }
        if self.out_channels % self.pathways.len() != 0 {
            return Err(Error::config(format!(
                "out_channels {} not divisible by {} pathways",
                self.out_channels,
                self.pathways.len()
            )));
        }
        check_odd_window("morph_block", self.window)?;
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky_slope must be finite"));
        }
        Ok(())
    }

    pub fn pathway_channels(&self) -> usize {
        self.out_channels / self.pathways.len()
    }

    /// Learnable scalar count, a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let r = self.reduce_channels;
        let kernel = match self.op_impl {
            OpImpl::NonLearnable => 0,
            OpImpl::Chm => r * self.window.iter().product::<usize>(),
        };
        let per_path = conv_params(r, self.in_channels, BLOCK_KERNEL)
            + kernel
            + conv_params(self.pathway_channels(), r, BLOCK_KERNEL);
        per_path * self.pathways.len()
    }

    fn pathway_prefix(&self, prefix: &str, index: usize) -> String {
        join(prefix, &format!("path{index}_{}", self.pathways[index].name()))
    }
}

/// Clamps every CHM kernel in `store` (names ending in `.kernel`) to
/// [`CHM_KERNEL_FLOOR`], keeping the filters positive-weighted.
pub fn project_chm_kernels<S: Scalar>(store: &mut ParamStore<S>) {
    let floor = S::of(CHM_KERNEL_FLOOR);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".kernel") {
            for v in t.data_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
    }
}

/// Registers all block parameters under `prefix` in pathway order.
pub fn init_morph_block<S: Scalar>(
    cfg: &MorphBlockConfig,
    prefix: &str,
    store: &mut ParamStore<S>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    for i in 0..cfg.pathways.len() {
        let p = cfg.pathway_prefix(prefix, i);
        let r = cfg.reduce_channels;
        init_conv(store, &join(&p, "conv1"), r, cfg.in_channels, BLOCK_KERNEL, rng)?;
        if cfg.op_impl == OpImpl::Chm {
            store.insert(join(&p, "kernel"), init_chm_kernel(r, cfg.window, rng)?)?;
        }
        init_conv(store, &join(&p, "conv2"), cfg.pathway_channels(), r, BLOCK_KERNEL, rng)?;
    }
    Ok(())
}

/// What the pathway uses in place of its morphological operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MorphTap {
    #[default]
    Operator,
    /// Replaces the operator by the zero map; isolates the skip connection.
    Zero,
}

/// Convolution plus per-channel bias; `prefix.weight` and `prefix.bias`.
pub fn conv_layer<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Bound,
    prefix: &str,
    x: Var,
    padding: Padding,
    stride: usize,
) -> Result<Var> {
    let w = params.get(&join(prefix, "weight"))?;
    let b = params.get(&join(prefix, "bias"))?;
    let y = tape.conv3d(x, w, padding, stride)?;
    tape.add_channel_bias(y, b)
}

/// Instance normalization with `prefix.scale` and `prefix.shift`.
pub fn norm_layer<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Bound,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let scale = params.get(&join(prefix, "scale"))?;
    let shift = params.get(&join(prefix, "shift"))?;
    tape.instance_norm(x, scale, shift, S::of(NORM_EPS))
}

/// One pathway; returns `out_channels / pathways` channels.
pub fn morph_pathway_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Bound,
    cfg: &MorphBlockConfig,
    prefix: &str,
    index: usize,
    x: Var,
    tap: MorphTap,
) -> Result<Var> {
    cfg.validate()?;
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if c != cfg.in_channels {
        return Err(Error::shape(
            "morph_pathway",
            format!("input has {c} channels, block expects {}", cfg.in_channels),
        ));
    }
    let op = *cfg
        .pathways
        .get(index)
        .ok_or_else(|| Error::config(format!("pathway index {index} out of range")))?;
    let p = cfg.pathway_prefix(prefix, index);
    let h = conv_layer(tape, params, &join(&p, "conv1"), x, Padding::Replicate, 1)?;
    let s = tape.sigmoid(h);
    let m = match tap {
        MorphTap::Zero => tape.mul_scalar(s, S::zero()),
        MorphTap::Operator => match cfg.op_impl {
            OpImpl::NonLearnable => morphology::apply(tape, s, op, Filter::Flat(cfg.window))?,
            OpImpl::Chm => {
                let s = tape.clamp_min(s, S::of(CHM_INPUT_FLOOR));
                debug_assert!(tape.value(s).data().iter().all(|&v| v > S::zero()));
                let kernel = params.get(&join(&p, "kernel"))?;
                morphology::apply(
                    tape,
                    s,
                    op,
                    Filter::Chm {
                        kernel,
                        power: S::one(),
                    },
                )?
            }
        },
    };
    let merged = if cfg.skip { tape.add(m, h)? } else { m };
    let a = tape.leaky_relu(merged, S::of(cfg.leaky_slope));
    conv_layer(tape, params, &join(&p, "conv2"), a, Padding::Replicate, 1)
}

/// All pathways in configuration order, concatenated along channels.
pub fn morph_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Bound,
    cfg: &MorphBlockConfig,
    prefix: &str,
    x: Var,
    tap: MorphTap,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(cfg.pathways.len());
    for i in 0..cfg.pathways.len() {
        outs.push(morph_pathway_forward(tape, params, cfg, prefix, i, x, tap)?);
    }
    tape.concat_channels(&outs)
}
