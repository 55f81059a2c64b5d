//! `bench`: wall-clock timings of the core operators and one training step.

use std::time::{Duration, Instant};

use morphgrad::data::{gen_sample, SynthSpec};
use morphgrad::morphology::{filter, MorphOp, StructElement};
use morphgrad::train::{loss_and_grad, Adam, Prepared, TrainConfig};
use morphgrad::{build_network, NetworkConfig, Padding, Tape, Tensor, Variant};

use crate::fail::Failure;

fn time(repeats: usize, mut f: impl FnMut() -> Result<(), Failure>) -> Result<Duration, Failure> {
    let mut best = Duration::MAX;
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed());
    }
    Ok(best)
}

fn report(name: &str, d: Duration) {
    println!("{name:<32} {:>10.3} ms", d.as_secs_f64() * 1e3);
}

/// Smooth strictly positive test volume.
fn volume(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| 0.75 + 0.25 * ((i as f64) * 0.618_034).sin())
}

pub fn run(extent: usize, repeats: usize) -> Result<(), Failure> {
    if extent < 16 || extent % 2 != 0 {
        return Err(Failure::config("--extent must be an even number of at least 16"));
    }
    if repeats == 0 {
        return Err(Failure::config("--repeats must be at least 1"));
    }
    let e = extent;
    println!("bench extent={e} repeats={repeats} (best of repeats)");

    let x = volume(&[1, 4, e, e, e]);
    let flat = StructElement::flat([3, 3, 3])?;
    let chm = StructElement::chm_uniform(4, [3, 3, 3])?;
    for (name, op) in [("erode", MorphOp::Erosion), ("open", MorphOp::Opening)] {
        report(&format!("flat {name} 4ch 3^3"), time(repeats, || {
            filter(&x, op, &flat, 1.0)?;
            Ok(())
        })?);
        report(&format!("chm {name} 4ch 3^3 p=2"), time(repeats, || {
            filter(&x, op, &chm, 2.0)?;
            Ok(())
        })?);
    }

    let input = volume(&[1, 8, e, e, e]);
    let kernel = volume(&[8, 8, 3, 3, 3]);
    report("conv3d 8->8 3^3 forward+backward", time(repeats, || {
        let mut tape = Tape::new();
        let xi = tape.param(input.clone());
        let k = tape.param(kernel.clone());
        let y = tape.conv3d(xi, k, Padding::Zero, 1)?;
        let loss = tape.sum(y);
        tape.backward(loss)?;
        Ok(())
    })?);

    let scale = e as f64 / 32.0;
    let spec = SynthSpec {
        extent: [e; 3],
        radius: [8.0 * scale, 12.0 * scale],
        margin: 2.5 * scale,
        ..SynthSpec::default()
    };
    let sample = Prepared::new(&gen_sample(&spec, 0)?)?;
    let train = TrainConfig::default();
    for variant in Variant::ALL {
        let net = NetworkConfig {
            variant,
            depth: 2,
            num_classes: spec.num_classes,
            ..NetworkConfig::default()
        };
        let mut model = build_network::<f64>(&net, 0)?;
        let mut adam = Adam::new(&train, &model.params);
        report(&format!("train step {variant}"), time(repeats, || {
            let (_, grads) = loss_and_grad(&model, &sample)?;
            adam.step(&mut model.params, &grads);
            Ok(())
        })?);
    }
    Ok(())
}
