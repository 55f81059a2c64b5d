mod common;

use common::*;
use morphgrad::blocks::{init_morph_block, morph_block_forward, morph_pathway_forward, MorphTap};
use morphgrad::morphology::{self, Filter, MorphOp};
use morphgrad::network::{build_network, dice_loss, one_hot};
use morphgrad::params::Bound;
use morphgrad::{
    ExtremumKind, MorphBlockConfig, NetworkConfig, OpImpl, Padding, ParamStore, Tape64,
    Tensor64, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn check(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: max relative error {err:e} >= {tol:e}");
}

#[test]
fn elementwise_and_activations() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[2, 3, 4], 0.5, 2.0);
    let b = uniform(&mut r, &[2, 3, 4], 0.5, 2.0);
    let s = uniform(&mut r, &[2, 3, 4], -3.0, 3.0);
    let pair = [a.clone(), b.clone()];
    check("add", grad_check(&pair, 2, 100, |t, v| t.add(v[0], v[1])), TOL);
    check("sub", grad_check(&pair, 3, 100, |t, v| t.sub(v[0], v[1])), TOL);
    check("mul", grad_check(&pair, 4, 100, |t, v| t.mul(v[0], v[1])), TOL);
    check("div", grad_check(&pair, 5, 100, |t, v| t.div(v[0], v[1])), TOL);
    for p in [-1.0, 0.0, 2.0, 0.5, -1.7] {
        let e = grad_check(&[a.clone()], 6, 100, |t, v| t.pow(v[0], p));
        check(&format!("pow {p}"), e, TOL);
    }
    let one = [s.clone()];
    check("add_scalar", grad_check(&one, 7, 100, |t, v| Ok(t.add_scalar(v[0], 0.3))), TOL);
    check("mul_scalar", grad_check(&one, 8, 100, |t, v| Ok(t.mul_scalar(v[0], -1.3))), TOL);
    check("sigmoid", grad_check(&one, 9, 100, |t, v| Ok(t.sigmoid(v[0]))), TOL);
    // no entry of `s` sits within 1e-3 of the kinks at 0 and 0.2
    let kinkless = s.map(|v| if v.abs() < 0.01 || (v - 0.2).abs() < 0.01 { v + 0.05 } else { v });
    let one = [kinkless];
    check("leaky_relu", grad_check(&one, 10, 100, |t, v| Ok(t.leaky_relu(v[0], 0.01))), TOL);
    check("clamp_min", grad_check(&one, 11, 100, |t, v| Ok(t.clamp_min(v[0], 0.2))), TOL);
    check("sum", grad_check(&one, 12, 100, |t, v| Ok(t.sum(v[0]))), TOL);
    check("mean", grad_check(&one, 13, 100, |t, v| Ok(t.mean(v[0]))), TOL);
}

#[test]
fn convolutions() {
    let mut r = rng(20);
    let x = uniform(&mut r, &[2, 3, 5, 4, 6], -1.0, 1.0);
    let k = uniform(&mut r, &[4, 3, 3, 3, 3], -1.0, 1.0);
    for padding in [Padding::Zero, Padding::Replicate] {
        for stride in [1, 2] {
            let e = grad_check(&[x.clone(), k.clone()], 21, 60, |t, v| {
                t.conv3d(v[0], v[1], padding, stride)
            });
            check(&format!("conv3d {padding:?} stride {stride}"), e, TOL);
        }
        let dk = uniform(&mut r, &[3, 1, 3, 1, 5], -1.0, 1.0);
        let e = grad_check(&[x.clone(), dk], 22, 60, |t, v| {
            t.depthwise_conv3d(v[0], v[1], padding)
        });
        check(&format!("depthwise {padding:?}"), e, TOL);
    }
    let bias = uniform(&mut r, &[3], -1.0, 1.0);
    let e = grad_check(&[x, bias], 23, 60, |t, v| t.add_channel_bias(v[0], v[1]));
    check("add_channel_bias", e, TOL);
}

#[test]
fn extremum_and_resampling() {
    let mut r = rng(30);
    let x = separated(&mut r, &[1, 2, 4, 5, 4], 0.01);
    for kind in [ExtremumKind::Min, ExtremumKind::Max] {
        let e = grad_check(&[x.clone()], 31, 160, |t, v| {
            t.sliding_extremum(v[0], kind, [3, 3, 3], None)
        });
        check(&format!("extremum {kind:?}"), e, TOL);
    }
    let small = separated(&mut r, &[1, 1, 3, 3, 4], 0.05);
    let off = separated(&mut r, &[3, 1, 3], 0.013);
    for kind in [ExtremumKind::Min, ExtremumKind::Max] {
        let e = grad_check(&[small.clone(), off.clone()], 32, 50, |t, v| {
            t.sliding_extremum(v[0], kind, [3, 1, 3], Some(v[1]))
        });
        check(&format!("extremum offsets {kind:?}"), e, TOL);
    }
    let e = grad_check(&[x.clone()], 33, 80, |t, v| t.upsample_nearest(v[0], [2, 1, 3]));
    check("upsample_nearest", e, TOL);
}

#[test]
fn channel_plumbing_and_normalization() {
    let mut r = rng(40);
    let a = uniform(&mut r, &[1, 2, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[1, 3, 3, 3, 3], -1.0, 1.0);
    let e = grad_check(&[a.clone(), b.clone()], 41, 100, |t, v| t.concat_channels(&[v[0], v[1]]));
    check("concat_channels", e, TOL);
    let e = grad_check(&[b.clone()], 42, 100, |t, v| t.slice_channels(v[0], 1..3));
    check("slice_channels", e, TOL);
    let scale = uniform(&mut r, &[3], 0.5, 1.5);
    let shift = uniform(&mut r, &[3], -0.5, 0.5);
    let e = grad_check(&[b.clone(), scale, shift], 43, 100, |t, v| {
        t.instance_norm(v[0], v[1], v[2], 1e-5)
    });
    check("instance_norm", e, TOL);
    let e = grad_check(&[b.clone()], 44, 100, |t, v| t.softmax_channels(v[0]));
    check("softmax_channels", e, TOL);
    let e = grad_check(&[b], 45, 100, |t, v| t.channel_sum(v[0]));
    check("channel_sum", e, TOL);
}

#[test]
fn dice_loss_gradient() {
    let mut r = rng(50);
    let logits = uniform(&mut r, &[1, 3, 3, 3, 3], -2.0, 2.0);
    let label = Tensor64::from_fn(&[3, 3, 3], |i| (i % 3) as f64);
    let target = one_hot(&label, 3).unwrap();
    let e = grad_check(&[logits], 51, 100, |t, v| {
        let p = t.softmax_channels(v[0])?;
        let tv = t.constant(target.clone());
        dice_loss(t, p, tv)
    });
    check("dice_loss", e, TOL);
}

#[test]
fn morphological_operators() {
    let mut r = rng(60);
    let x = separated(&mut r, &[1, 2, 4, 4, 5], 0.01).map(|v| v + 1.0);
    for op in MorphOp::ALL {
        let e = grad_check(&[x.clone()], 61, 160, |t, v| {
            morphology::apply(t, v[0], op, Filter::Flat([3, 3, 3]))
        });
        check(&format!("flat {op:?}"), e, TOL);
    }
    let pos = uniform(&mut r, &[1, 2, 4, 4, 5], 0.2, 1.0);
    let w = uniform(&mut r, &[2, 1, 3, 3, 3], 0.2, 1.0);
    for op in MorphOp::ALL {
        let e = grad_check(&[pos.clone(), w.clone()], 62, 80, |t, v| {
            morphology::apply(t, v[0], op, Filter::Chm { kernel: v[1], power: 1.0 })
        });
        check(&format!("chm {op:?}"), e, TOL);
    }
    for p in [-3.0, 0.5, 4.0] {
        let e = grad_check(&[pos.clone(), w.clone()], 63, 80, |t, v| {
            morphology::chm_general(t, v[0], v[1], p)
        });
        check(&format!("chm_general {p}"), e, TOL);
    }
}

fn block_inputs(cfg: &MorphBlockConfig, seed: u64) -> (Vec<String>, Vec<Tensor64>) {
    let mut store = ParamStore::<f64>::new();
    init_morph_block(cfg, "b", &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let values = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    (names, values)
}

fn bound_from(names: &[String], vars: &[morphgrad::Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

#[test]
fn morph_block_all_variants() {
    let mut r = rng(70);
    let x = uniform(&mut r, &[1, 4, 5, 5, 5], -1.0, 1.0);
    for (op_impl, skip) in [
        (OpImpl::NonLearnable, false),
        (OpImpl::NonLearnable, true),
        (OpImpl::Chm, false),
        (OpImpl::Chm, true),
    ] {
        let cfg = MorphBlockConfig::new(4, 8, op_impl, skip);
        let (names, mut inputs) = block_inputs(&cfg, 71);
        inputs.insert(0, x.clone());
        let e = grad_check(&inputs, 72, 30, |t, v| {
            let p = bound_from(&names, &v[1..]);
            morph_block_forward(t, &p, &cfg, "b", v[0], MorphTap::Operator)
        });
        check(&format!("morph block {op_impl:?} skip={skip}"), e, TOL);
    }
}

#[test]
fn pathway_gradient_reaches_conv1_under_saturation() {
    let mut r = rng(80);
    // large inputs drive the sigmoid into saturation
    let x = uniform(&mut r, &[1, 2, 4, 4, 4], -40.0, 40.0);
    let cfg = MorphBlockConfig::new(2, 4, OpImpl::NonLearnable, true);
    let (names, mut inputs) = block_inputs(&cfg, 81);
    inputs.insert(0, x);
    let conv1 = names.iter().position(|n| n.ends_with("path1_dilation.conv1.weight")).unwrap();
    let e = grad_check(&inputs, 82, 40, |t, v| {
        let p = bound_from(&names, &v[1..]);
        morph_pathway_forward(t, &p, &cfg, "b", 1, v[0], MorphTap::Operator)
    });
    check("saturated pathway", e, TOL);
    let mut tape = Tape64::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let p = bound_from(&names, &vars[1..]);
    let y = morph_pathway_forward(&mut tape, &p, &cfg, "b", 1, vars[0], MorphTap::Operator).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(vars[1 + conv1]).unwrap();
    assert!(g.data().iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn network_spot_check() {
    let label = Tensor64::from_fn(&[16, 16, 16], |i| ((i / 16 / 16 + i / 16 % 16) / 11) as f64);
    let target = one_hot(&label, 3).unwrap();
    let mut r = rng(90);
    let x = uniform(&mut r, &[1, 1, 16, 16, 16], -1.0, 1.0);
    for variant in [Variant::Baseline, Variant::ChmSkip] {
        let cfg = NetworkConfig {
            variant,
            depth: 2,
            base_channels: 8,
            num_classes: 3,
            deep_supervision_levels: 2,
            ..NetworkConfig::default()
        };
        let model = build_network::<f64>(&cfg, 91).unwrap();
        let names: Vec<String> = model.params.names().map(String::from).collect();
        let values: Vec<Tensor64> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let err = network_fd(&model, &names, &values, &x, &target, 92, 50);
        check(&format!("network {variant}"), err, 1e-3);
    }
}

/// Probes 50 random scalar parameters of the whole network with the Dice loss.
fn network_fd(
    model: &morphgrad::SegmentationModel<f64>,
    names: &[String],
    values: &[Tensor64],
    x: &Tensor64,
    target: &Tensor64,
    seed: u64,
    probes: usize,
) -> f64 {
    use rand::Rng;
    let loss_at = |vals: &[Tensor64]| -> (f64, Vec<Tensor64>) {
        let mut tape = Tape64::new();
        let vars: Vec<_> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let xv = tape.constant(x.clone());
        let tv = tape.constant(target.clone());
        let out = model.forward(&mut tape, &p, xv).unwrap();
        let probs = tape.softmax_channels(out.logits).unwrap();
        let loss = dice_loss(&mut tape, probs, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor64::zeros(tape.shape(v))))
            .collect();
        (tape.value(loss).data()[0], grads)
    };
    let (_, grads) = loss_at(values);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = r.gen_range(0..values.len());
        let j = r.gen_range(0..values[i].len());
        let mut vals = values.to_vec();
        vals[i].data_mut()[j] += FD_STEP;
        let up = loss_at(&vals).0;
        vals[i].data_mut()[j] -= 2.0 * FD_STEP;
        let down = loss_at(&vals).0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(grads[i].data()[j], numeric);
        assert!(e < 1e-3, "{}[{j}]: analytic {} numeric {numeric}", names[i], grads[i].data()[j]);
        worst = worst.max(e);
    }
    worst
}
