//! Finite-difference verification of every differentiable primitive.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{init_morph_block, morph_block_forward, MorphBlockConfig, MorphTap, OpImpl};
use crate::error::{Error, Result};
use crate::{ExtremumKind, Padding};
use crate::morphology::{self, Filter, MorphOp};
use crate::network::{build_network, dice_loss, one_hot, NetworkConfig, Variant};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative-error threshold for primitives and blocks.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Relative-error threshold for whole-network spot checks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
const NETWORK_PROBES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Morph,
    Block,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Tensor, Scope::Morph, Scope::Block, Scope::Network];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Morph => "morph",
            Scope::Block => "block",
            Scope::Network => "network",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scope {s:?}; expected tensor|morph|block|network")))
    }
}

/// Worst relative error observed for one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<36} max_rel_err {:.3e}  tol {:.0e}  {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn weighted_loss(inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>, build: &Build) -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::ones(tape.shape(out)),
    };
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    Ok((tape, vars, loss, w))
}

/// Compares tape gradients of `sum(build(inputs) * r)`, with random weights
/// `r` in `[0.5, 1.5)`, against central differences on at most `probes`
/// entries of every input. Differences are taken per output entry before
/// weighting.
pub fn check_primitive(
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    probes: usize,
    build: &Build,
) -> Result<f64> {
    let (_, _, _, shape_probe) = weighted_loss(inputs, None, build)?;
    let weights = Tensor::from_fn(shape_probe.shape(), |_| rng.gen_range(0.5..1.5));
    let (tape, vars, loss, _) = weighted_loss(inputs, Some(&weights), build)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars)?;
        Ok(t.value(out).clone())
    };
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut idx: Vec<usize> = (0..x.len()).collect();
        if idx.len() > probes {
            idx.shuffle(rng);
            idx.truncate(probes);
        }
        let mut xs = inputs.to_vec();
        for j in idx {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let delta: f64 = up
                .data()
                .iter()
                .zip(down.data())
                .zip(weights.data())
                .map(|((u, d), r)| (u - d) * r)
                .sum();
            let numeric = delta / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Distinct values at least `gap` apart so that window extrema are unique.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::from_fn(shape, |i| v[i])
}

struct Suite {
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Suite {
    fn run(&mut self, name: impl Into<String>, inputs: &[Tensor<f64>], probes: usize, build: &Build) -> Result<()> {
        let err = check_primitive(inputs, &mut self.rng, probes, build)?;
        self.results.push(CheckResult {
            name: name.into(),
            max_rel_err: err,
            tolerance: PRIMITIVE_TOLERANCE,
        });
        Ok(())
    }
}

fn tensor_scope(s: &mut Suite) -> Result<()> {
    let a = uniform(&mut s.rng, &[2, 3, 4], 0.5, 2.0);
    let b = uniform(&mut s.rng, &[2, 3, 4], 0.5, 2.0);
    let signed = uniform(&mut s.rng, &[2, 3, 4], -3.0, 3.0)
        .map(|v| if v.abs() < 0.05 || (v - 0.2).abs() < 0.05 { v + 0.1 } else { v });
    let pair = [a.clone(), b];
    let one = [signed];
    s.run("add", &pair, 50, &|t, v| t.add(v[0], v[1]))?;
    s.run("sub", &pair, 50, &|t, v| t.sub(v[0], v[1]))?;
    s.run("mul", &pair, 50, &|t, v| t.mul(v[0], v[1]))?;
    s.run("div", &pair, 50, &|t, v| t.div(v[0], v[1]))?;
    s.run("pow", &[a], 50, &|t, v| t.pow(v[0], -1.5))?;
    s.run("add_scalar", &one, 50, &|t, v| Ok(t.add_scalar(v[0], 0.3)))?;
    s.run("mul_scalar", &one, 50, &|t, v| Ok(t.mul_scalar(v[0], -1.3)))?;
    s.run("neg", &one, 50, &|t, v| Ok(t.neg(v[0])))?;
    s.run("sigmoid", &one, 50, &|t, v| Ok(t.sigmoid(v[0])))?;
    s.run("leaky_relu", &one, 50, &|t, v| Ok(t.leaky_relu(v[0], 0.01)))?;
    s.run("clamp_min", &one, 50, &|t, v| Ok(t.clamp_min(v[0], 0.2)))?;
    s.run("sum", &one, 50, &|t, v| Ok(t.sum(v[0])))?;
    s.run("mean", &one, 50, &|t, v| Ok(t.mean(v[0])))?;

    let x = uniform(&mut s.rng, &[1, 2, 5, 4, 6], -1.0, 1.0);
    let k = uniform(&mut s.rng, &[3, 2, 3, 3, 3], -1.0, 1.0);
    for padding in [Padding::Zero, Padding::Replicate] {
        for stride in [1, 2] {
            let name = format!("conv3d {} stride {stride}", padding_name(padding));
            s.run(name, &[x.clone(), k.clone()], 40, &|t, v| t.conv3d(v[0], v[1], padding, stride))?;
        }
        let dk = uniform(&mut s.rng, &[2, 1, 3, 1, 3], -1.0, 1.0);
        let name = format!("depthwise_conv3d {}", padding_name(padding));
        s.run(name, &[x.clone(), dk], 40, &|t, v| t.depthwise_conv3d(v[0], v[1], padding))?;
    }
    let bias = uniform(&mut s.rng, &[2], -1.0, 1.0);
    s.run("add_channel_bias", &[x.clone(), bias], 40, &|t, v| t.add_channel_bias(v[0], v[1]))?;

    let distinct = separated(&mut s.rng, &[1, 2, 4, 4, 4], 0.01);
    for kind in [ExtremumKind::Min, ExtremumKind::Max] {
        let name = format!("sliding_extremum {}", kind_name(kind));
        s.run(name, &[distinct.clone()], 60, &|t, v| t.sliding_extremum(v[0], kind, [3, 3, 3], None))?;
    }
    s.run("upsample_nearest", &[x.clone()], 40, &|t, v| t.upsample_nearest(v[0], [2, 1, 2]))?;

    let c = uniform(&mut s.rng, &[1, 3, 3, 3, 3], -1.0, 1.0);
    let d = uniform(&mut s.rng, &[1, 2, 3, 3, 3], -1.0, 1.0);
    s.run("concat_channels", &[d, c.clone()], 40, &|t, v| {
        t.concat_channels(&[v[0], v[1]])
    })?;
    s.run("slice_channels", &[c.clone()], 40, &|t, v| t.slice_channels(v[0], 1..3))?;
    let scale = uniform(&mut s.rng, &[3], 0.5, 1.5);
    let shift = uniform(&mut s.rng, &[3], -0.5, 0.5);
    s.run("instance_norm", &[c.clone(), scale, shift], 40, &|t, v| {
        t.instance_norm(v[0], v[1], v[2], 1e-5)
    })?;
    s.run("softmax_channels", &[c.clone()], 40, &|t, v| t.softmax_channels(v[0]))?;
    s.run("channel_sum", &[c.clone()], 40, &|t, v| t.channel_sum(v[0]))?;
    let label = Tensor::from_fn(&[3, 3, 3], |i| (i % 3) as f64);
    let target = one_hot(&label, 3)?;
    s.run("dice_loss", &[c], 40, &|t, v| {
        let p = t.softmax_channels(v[0])?;
        let tv = t.constant(target.clone());
        dice_loss(t, p, tv)
    })
}

fn morph_scope(s: &mut Suite) -> Result<()> {
    let x = separated(&mut s.rng, &[1, 2, 4, 4, 4], 0.01).map(|v| v + 1.0);
    for op in MorphOp::ALL {
        let name = format!("flat {}", op.name());
        s.run(name, &[x.clone()], 60, &|t, v| morphology::apply(t, v[0], op, Filter::Flat([3, 3, 3])))?;
    }
    let pos = uniform(&mut s.rng, &[1, 2, 4, 4, 4], 0.2, 1.0);
    let w = uniform(&mut s.rng, &[2, 1, 3, 3, 3], 0.2, 1.0);
    for op in MorphOp::ALL {
        let name = format!("chm {} (input, kernel)", op.name());
        s.run(name, &[pos.clone(), w.clone()], 60, &|t, v| {
            morphology::apply(t, v[0], op, Filter::Chm { kernel: v[1], power: 1.0 })
        })?;
    }
    for p in [-3.0, 2.5] {
        let name = format!("chm_general P={p}");
        s.run(name, &[pos.clone(), w.clone()], 60, &|t, v| morphology::chm_general(t, v[0], v[1], p))?;
    }
    Ok(())
}

fn store_inputs(store: &ParamStore<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).unzip()
}

fn block_scope(s: &mut Suite) -> Result<()> {
    let x = uniform(&mut s.rng, &[1, 4, 5, 5, 5], -1.0, 1.0);
    for (op_impl, skip) in [
        (OpImpl::NonLearnable, false),
        (OpImpl::NonLearnable, true),
        (OpImpl::Chm, false),
        (OpImpl::Chm, true),
    ] {
        let cfg = MorphBlockConfig::new(4, 8, op_impl, skip);
        let mut store = ParamStore::new();
        init_morph_block(&cfg, "b", &mut store, &mut s.rng)?;
        let (names, mut inputs) = store_inputs(&store);
        inputs.insert(0, x.clone());
        let name = format!(
            "morph block {}{}",
            if op_impl == OpImpl::Chm { "chm" } else { "nonlearnable" },
            if skip { "-skip" } else { "" }
        );
        s.run(name, &inputs, 20, &|t, v| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            morph_block_forward(t, &p, &cfg, "b", v[0], MorphTap::Operator)
        })?;
    }
    Ok(())
}

fn network_scope(s: &mut Suite) -> Result<()> {
    let label = Tensor::from_fn(&[16, 16, 16], |i| ((i / 256 + i / 16 % 16) / 11) as f64);
    let target = one_hot(&label, 3)?;
    let x = uniform(&mut s.rng, &[1, 1, 16, 16, 16], -1.0, 1.0);
    for variant in [Variant::Baseline, Variant::ChmSkip] {
        let cfg = NetworkConfig {
            variant,
            depth: 2,
            base_channels: 8,
            num_classes: 3,
            deep_supervision_levels: 2,
            ..NetworkConfig::default()
        };
        let model = build_network::<f64>(&cfg, s.rng.gen())?;
        let (names, values) = store_inputs(&model.params);
        let loss_at = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let xv = tape.constant(x.clone());
            let tv = tape.constant(target.clone());
            let out = model.forward(&mut tape, &p, xv)?;
            let probs = tape.softmax_channels(out.logits)?;
            let loss = dice_loss(&mut tape, probs, tv)?;
            let mut g = tape.backward(loss)?;
            let grads = p.gradients(&tape, &mut g);
            let grads = names.iter().map(|n| grads.get(n).expect("bound").clone()).collect();
            Ok((tape.value(loss).data()[0], grads))
        };
        let (_, grads) = loss_at(&values)?;
        let mut worst = 0.0f64;
        let mut vals = values.clone();
        for _ in 0..NETWORK_PROBES {
            let i = s.rng.gen_range(0..vals.len());
            let j = s.rng.gen_range(0..vals[i].len());
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&vals)?.0;
            vals[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&vals)?.0;
            vals[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(grads[i].data()[j], (up - down) / (2.0 * FD_STEP)));
        }
        s.results.push(CheckResult {
            name: format!("network {variant} ({NETWORK_PROBES} parameters)"),
            max_rel_err: worst,
            tolerance: NETWORK_TOLERANCE,
        });
    }
    Ok(())
}

fn padding_name(p: Padding) -> &'static str {
    match p {
        Padding::Zero => "zero",
        Padding::Replicate => "replicate",
    }
}

fn kind_name(k: ExtremumKind) -> &'static str {
    match k {
        ExtremumKind::Min => "min",
        ExtremumKind::Max => "max",
    }
}

/// Runs every check of `scope`; the report depends only on `seed`.
pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        results: Vec::new(),
    };
    match scope {
        Scope::Tensor => tensor_scope(&mut suite)?,
        Scope::Morph => morph_scope(&mut suite)?,
        Scope::Block => block_scope(&mut suite)?,
        Scope::Network => network_scope(&mut suite)?,
    }
    Ok(suite.results)
}
