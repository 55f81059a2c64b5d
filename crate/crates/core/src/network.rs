//! U-Net style segmentation network with morphological encoder blocks.
//!
//! Encoder level `l` has `base_channels * 2^l` channels. Its entry
//! convolution (stride 2 below the top level) is followed by a residual
//! block: a pure context block for the baseline, or a context half
//! concatenated with a morphological half for the other variants. The
//! decoder upsamples, fuses the skip, and localizes; segmentation heads at
//! the deepest supervised levels are upsampled and summed into the logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    conv_layer, init_morph_block, morph_block_forward, norm_layer, MorphBlockConfig, MorphTap,
    OpImpl,
};
use crate::error::{Error, Result};
use crate::kernels::conv::{check_odd_window, Padding};
use crate::params::{conv_params, init_conv, init_norm, join, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    #[serde(rename = "nonlearnable")]
    NonLearnable,
    #[serde(rename = "nonlearnable-skip")]
    NonLearnableSkip,
    Chm,
    ChmSkip,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::NonLearnable,
        Variant::NonLearnableSkip,
        Variant::Chm,
        Variant::ChmSkip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NonLearnable => "nonlearnable",
            Variant::NonLearnableSkip => "nonlearnable-skip",
            Variant::Chm => "chm",
            Variant::ChmSkip => "chm-skip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!(
                "unknown variant {s:?}; valid: {}",
                names.join(", ")
            ))
        })
    }

    /// Operator implementation and skip flag of the morphological half.
    pub fn morph(self) -> Option<(OpImpl, bool)> {
        match self {
            Variant::Baseline => None,
            Variant::NonLearnable => Some((OpImpl::NonLearnable, false)),
            Variant::NonLearnableSkip => Some((OpImpl::NonLearnable, true)),
            Variant::Chm => Some((OpImpl::Chm, false)),
            Variant::ChmSkip => Some((OpImpl::Chm, true)),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_slope() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub deep_supervision_levels: usize,
    pub input_channels: usize,
    pub window: [usize; 3],
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            depth: 3,
            base_channels: 8,
            num_classes: 4,
            deep_supervision_levels: 2,
            input_channels: 1,
            window: [3, 3, 3],
            leaky_slope: 0.01,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be >= 1"));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::config(format!(
                "base_channels must be a positive even number, got {}",
                self.base_channels
            )));
        }
        if self.variant != Variant::Baseline && (self.base_channels / 2) % 4 != 0 {
            return Err(Error::config(format!(
                "morphological half of base_channels {} must split over 4 pathways",
                self.base_channels
            )));
        }
        if self.deep_supervision_levels == 0 || self.deep_supervision_levels > self.depth {
            return Err(Error::config(format!(
                "deep_supervision_levels must be in 1..={}, got {}",
                self.depth, self.deep_supervision_levels
            )));
        }
        check_odd_window("network", self.window)?;
        if !self.leaky_slope.is_finite() {
            return Err(Error::config("leaky_slope must be finite"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Morphological block of encoder level `level`, if the variant has one.
    pub fn morph_block(&self, level: usize) -> Option<MorphBlockConfig> {
        self.variant.morph().map(|(op_impl, skip)| {
            let c = self.channels(level);
            let mut b = MorphBlockConfig::new(c, c / 2, op_impl, skip);
            b.window = self.window;
            b.leaky_slope = self.leaky_slope;
            b
        })
    }

    /// Output channels of the context block at `level`.
    pub fn context_channels(&self, level: usize) -> usize {
        let c = self.channels(level);
        match self.variant {
            Variant::Baseline => c,
            _ => c / 2,
        }
    }

    /// Required divisor of each input spatial extent.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Learnable scalar count.
    pub fn param_count(&self) -> usize {
        let norm = |c: usize| 2 * c;
        let mut total = 0;
        for l in 0..self.depth {
            let c = self.channels(l);
            let cin = if l == 0 { self.input_channels } else { self.channels(l - 1) };
            let cc = self.context_channels(l);
            total += conv_params(c, cin, 3);
            total += norm(c) + conv_params(cc, c, 3) + norm(cc) + conv_params(cc, cc, 3);
            total += self.morph_block(l).map_or(0, |b| b.param_count());
        }
        for l in 0..self.depth - 1 {
            let c = self.channels(l);
            total += conv_params(c, 2 * c, 3) + norm(c);
            total += conv_params(c, 2 * c, 3) + norm(c) + conv_params(c, c, 1) + norm(c);
        }
        for l in 0..self.deep_supervision_levels {
            total += conv_params(self.num_classes, self.channels(l), 1);
        }
        total
    }
}

/// A configuration with its learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel<S> {
    pub config: NetworkConfig,
    pub params: ParamStore<S>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Summed, full-resolution logits `[N,K,D,H,W]`.
    pub logits: Var,
    /// Auxiliary head maps at their native resolution, shallowest first.
    pub aux: Vec<Var>,
    /// `(context, morphological)` channel counts of each encoder level.
    pub encoder_channels: Vec<(usize, usize)>,
}

fn context_prefix(level: usize) -> String {
    format!("enc{level}.context")
}

fn init_context<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_norm(store, &join(prefix, "norm1"), cin)?;
    init_conv(store, &join(prefix, "conv1"), cout, cin, 3, rng)?;
    init_norm(store, &join(prefix, "norm2"), cout)?;
    init_conv(store, &join(prefix, "conv2"), cout, cout, 3, rng)
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_network<S: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<SegmentationModel<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for l in 0..cfg.depth {
        let c = cfg.channels(l);
        let cin = if l == 0 { cfg.input_channels } else { cfg.channels(l - 1) };
        init_conv(&mut store, &format!("enc{l}.entry"), c, cin, 3, &mut rng)?;
        init_context(&mut store, &context_prefix(l), c, cfg.context_channels(l), &mut rng)?;
        if let Some(b) = cfg.morph_block(l) {
            init_morph_block(&b, &format!("enc{l}.morph"), &mut store, &mut rng)?;
        }
    }
    for l in (0..cfg.depth - 1).rev() {
        let c = cfg.channels(l);
        init_conv(&mut store, &format!("dec{l}.up"), c, 2 * c, 3, &mut rng)?;
        init_norm(&mut store, &format!("dec{l}.up_norm"), c)?;
        init_conv(&mut store, &format!("dec{l}.loc1"), c, 2 * c, 3, &mut rng)?;
        init_norm(&mut store, &format!("dec{l}.loc1_norm"), c)?;
        init_conv(&mut store, &format!("dec{l}.loc2"), c, c, 1, &mut rng)?;
        init_norm(&mut store, &format!("dec{l}.loc2_norm"), c)?;
    }
    for l in 0..cfg.deep_supervision_levels {
        init_conv(&mut store, &format!("head{l}"), cfg.num_classes, cfg.channels(l), 1, &mut rng)?;
    }
    Ok(SegmentationModel {
        config: cfg.clone(),
        params: store,
    })
}

fn context_forward<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    prefix: &str,
    x: Var,
    slope: S,
) -> Result<Var> {
    let a = norm_layer(tape, p, &join(prefix, "norm1"), x)?;
    let a = tape.leaky_relu(a, slope);
    let a = conv_layer(tape, p, &join(prefix, "conv1"), a, Padding::Zero, 1)?;
    let a = norm_layer(tape, p, &join(prefix, "norm2"), a)?;
    let a = tape.leaky_relu(a, slope);
    conv_layer(tape, p, &join(prefix, "conv2"), a, Padding::Zero, 1)
}

fn norm_act<S: Scalar>(tape: &mut Tape<S>, p: &Bound, prefix: &str, x: Var, slope: S) -> Result<Var> {
    let a = norm_layer(tape, p, prefix, x)?;
    Ok(tape.leaky_relu(a, slope))
}

impl<S: Scalar> SegmentationModel<S> {
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let k = cfg.spatial_divisor();
        match shape {
            &[_, c, d, h, w]
                if c == cfg.input_channels && [d, h, w].iter().all(|e| e % k == 0) =>
            {
                Ok(())
            }
            _ => Err(Error::shape(
                "network_forward",
                format!(
                    "input {shape:?} needs {} channels and spatial extents divisible by {k}",
                    cfg.input_channels
                ),
            )),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<ForwardOutput> {
        self.forward_with(tape, p, x, MorphTap::Operator)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        x: Var,
        tap: MorphTap,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        self.check_input(tape.shape(x))?;
        let slope = S::of(cfg.leaky_slope);
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut encoder_channels = Vec::with_capacity(cfg.depth);
        let mut cur = x;
        for l in 0..cfg.depth {
            let stride = if l == 0 { 1 } else { 2 };
            let entry = conv_layer(tape, p, &format!("enc{l}.entry"), cur, Padding::Zero, stride)?;
            let ctx = context_forward(tape, p, &context_prefix(l), entry, slope)?;
            let ctx_c = tape.shape(ctx)[1];
            let (block, morph_c) = match cfg.morph_block(l) {
                None => (ctx, 0),
                Some(b) => {
                    let m = morph_block_forward(tape, p, &b, &format!("enc{l}.morph"), entry, tap)?;
                    let mc = tape.shape(m)[1];
                    (tape.concat_channels(&[ctx, m])?, mc)
                }
            };
            encoder_channels.push((ctx_c, morph_c));
            cur = tape.add(entry, block)?;
            skips.push(cur);
        }
        let mut features = vec![cur; cfg.depth];
        for l in (0..cfg.depth - 1).rev() {
            let up = tape.upsample_nearest(cur, [2, 2, 2])?;
            let up = conv_layer(tape, p, &format!("dec{l}.up"), up, Padding::Zero, 1)?;
            let up = norm_act(tape, p, &format!("dec{l}.up_norm"), up, slope)?;
            let fused = tape.concat_channels(&[up, skips[l]])?;
            let a = conv_layer(tape, p, &format!("dec{l}.loc1"), fused, Padding::Zero, 1)?;
            let a = norm_act(tape, p, &format!("dec{l}.loc1_norm"), a, slope)?;
            let a = conv_layer(tape, p, &format!("dec{l}.loc2"), a, Padding::Zero, 1)?;
            cur = norm_act(tape, p, &format!("dec{l}.loc2_norm"), a, slope)?;
            features[l] = cur;
        }
        let mut logits = conv_layer(tape, p, "head0", features[0], Padding::Zero, 1)?;
        let mut aux = Vec::new();
        for (l, &feat) in features.iter().enumerate().take(cfg.deep_supervision_levels).skip(1) {
            let a = conv_layer(tape, p, &format!("head{l}"), feat, Padding::Zero, 1)?;
            aux.push(a);
            let f = 1 << l;
            let up = tape.upsample_nearest(a, [f, f, f])?;
            logits = tape.add(logits, up)?;
        }
        Ok(ForwardOutput {
            logits,
            aux,
            encoder_channels,
        })
    }

    /// Class probabilities for `x` without keeping the tape.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv)?;
        let probs = tape.softmax_channels(out.logits)?;
        Ok(tape.value(probs).clone())
    }
}

fn check_one_hot<S: Scalar>(target: &Tensor<S>) -> Result<()> {
    let [n, k, d, h, w] = target.dims5("dice_loss")?;
    let vol = d * h * w;
    let t = target.data();
    for b in 0..n {
        for v in 0..vol {
            let mut ones = 0;
            for c in 0..k {
                let x = t[(b * k + c) * vol + v];
                if x == S::one() {
                    ones += 1;
                } else if x != S::zero() {
                    return Err(Error::usage(format!(
                        "target is not one-hot: value {x} at flat index {}",
                        (b * k + c) * vol + v
                    )));
                }
            }
            if ones != 1 {
                return Err(Error::usage(format!(
                    "target is not one-hot: {ones} active classes at batch {b}, voxel {v}"
                )));
            }
        }
    }
    Ok(())
}

/// Macro-averaged soft Dice loss
/// `1 - mean_k (2 sum(u v) + eps) / (sum(u) + sum(v) + eps)`.
pub fn dice_loss<S: Scalar>(tape: &mut Tape<S>, probs: Var, target: Var) -> Result<Var> {
    if tape.shape(probs) != tape.shape(target) {
        return Err(Error::shape(
            "dice_loss",
            format!("probs {:?} vs target {:?}", tape.shape(probs), tape.shape(target)),
        ));
    }
    check_one_hot(tape.value(target))?;
    let eps = S::of(DICE_EPS);
    let uv = tape.mul(probs, target)?;
    let inter = tape.channel_sum(uv)?;
    let su = tape.channel_sum(probs)?;
    let sv = tape.channel_sum(target)?;
    let num = tape.mul_scalar(inter, S::of(2.0));
    let num = tape.add_scalar(num, eps);
    let den = tape.add(su, sv)?;
    let den = tape.add_scalar(den, eps);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, S::one()))
}

/// One-hot `[1,K,D,H,W]` encoding of a `[D,H,W]` label volume.
pub fn one_hot<S: Scalar>(label: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let dims = match label.shape() {
        &[d, h, w] => [d, h, w],
        other => {
            return Err(Error::shape(
                "one_hot",
                format!("label must be [D,H,W], got {other:?}"),
            ))
        }
    };
    let vol: usize = dims.iter().product();
    let mut out = vec![S::zero(); k * vol];
    for (v, &c) in label.data().iter().enumerate() {
        let ci = c.to_usize().filter(|&ci| ci < k && S::of_usize(ci) == c);
        let ci = ci.ok_or_else(|| {
            Error::usage(format!("label {c} at voxel {v} is not a class id below {k}"))
        })?;
        out[ci * vol + v] = S::one();
    }
    Tensor::new(vec![1, k, dims[0], dims[1], dims[2]], out)
}
