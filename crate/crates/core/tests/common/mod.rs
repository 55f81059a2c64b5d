//! Brute-force reference implementations and a finite-difference checker.
#![allow(dead_code)]

use morphgrad::{Padding, Result, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values that are pairwise separated by at least `gap`, shuffled.
pub fn separated(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor64 {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * gap + rng.gen_range(0.0..gap * 0.1))
        .collect();
    v.shuffle(rng);
    Tensor64::new(shape.to_vec(), v).unwrap()
}

fn dims5(t: &Tensor64) -> [usize; 5] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Reads `x[n, c, z, y, x]` with out-of-range coordinates padded.
fn read_padded(t: &Tensor64, n: usize, c: usize, p: [isize; 3], padding: Padding) -> f64 {
    let [_, cc, d, h, w] = dims5(t);
    let ext = [d as isize, h as isize, w as isize];
    let mut q = [0usize; 3];
    for a in 0..3 {
        if p[a] < 0 || p[a] >= ext[a] {
            match padding {
                Padding::Zero => return 0.0,
                Padding::Replicate => q[a] = p[a].clamp(0, ext[a] - 1) as usize,
            }
        } else {
            q[a] = p[a] as usize;
        }
    }
    t.data()[(((n * cc + c) * d + q[0]) * h + q[1]) * w + q[2]]
}

/// Six-nested-loop cross-correlation with centered "same" padding.
pub fn conv3d_oracle(x: &Tensor64, k: &Tensor64, padding: Padding, stride: usize) -> Tensor64 {
    let [n, cin, d, h, w] = dims5(x);
    let [cout, _, kd, kh, kw] = dims5(k);
    let out = [d.div_ceil(stride), h.div_ceil(stride), w.div_ceil(stride)];
    let r = [kd / 2, kh / 2, kw / 2].map(|v| v as isize);
    let mut y = Tensor64::zeros(&[n, cout, out[0], out[1], out[2]]);
    let mut idx = 0;
    for b in 0..n {
        for co in 0..cout {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for tz in 0..kd {
                                for ty in 0..kh {
                                    for tx in 0..kw {
                                        let p = [
                                            (oz * stride + tz) as isize - r[0],
                                            (oy * stride + ty) as isize - r[1],
                                            (ox * stride + tx) as isize - r[2],
                                        ];
                                        let wv = k.data()
                                            [(((co * cin + ci) * kd + tz) * kh + ty) * kw + tx];
                                        acc += wv * read_padded(x, b, ci, p, padding);
                                    }
                                }
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    y
}

/// Depthwise correlation by direct summation.
pub fn depthwise_oracle(x: &Tensor64, k: &Tensor64, padding: Padding) -> Tensor64 {
    let [n, c, d, h, w] = dims5(x);
    let [_, _, kd, kh, kw] = dims5(k);
    let r = [kd / 2, kh / 2, kw / 2].map(|v| v as isize);
    let mut y = Tensor64::zeros(x.shape());
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for tz in 0..kd {
                            for ty in 0..kh {
                                for tx in 0..kw {
                                    let p = [
                                        (z + tz) as isize - r[0],
                                        (yy + ty) as isize - r[1],
                                        (xx + tx) as isize - r[2],
                                    ];
                                    let wv = k.data()[((ch * kd + tz) * kh + ty) * kw + tx];
                                    acc += wv * read_padded(x, b, ch, p, padding);
                                }
                            }
                        }
                        y.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    y
}

/// Window scan with the window truncated at the border.
pub fn extremum_oracle(x: &Tensor64, max: bool, window: [usize; 3]) -> Tensor64 {
    let [n, c, d, h, w] = dims5(x);
    let r = window.map(|k| (k / 2) as isize);
    let ext = [d, h, w].map(|e| e as isize);
    let mut y = Tensor64::zeros(x.shape());
    for b in 0..n * c {
        for z in 0..d as isize {
            for yy in 0..h as isize {
                for xx in 0..w as isize {
                    let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
                    for vz in z - r[0]..=z + r[0] {
                        for vy in yy - r[1]..=yy + r[1] {
                            for vx in xx - r[2]..=xx + r[2] {
                                if vz < 0 || vy < 0 || vx < 0 {
                                    continue;
                                }
                                if vz >= ext[0] || vy >= ext[1] || vx >= ext[2] {
                                    continue;
                                }
                                let v = x.data()[((b * d + vz as usize) * h + vy as usize) * w
                                    + vx as usize];
                                if (max && v > best) || (!max && v < best) {
                                    best = v;
                                }
                            }
                        }
                    }
                    y.data_mut()[((b * d + z as usize) * h + yy as usize) * w + xx as usize] =
                        best;
                }
            }
        }
    }
    y
}

/// `(x^(p+1) * w) / (x^p * w)` with replicate padding, by direct summation.
pub fn chm_oracle(x: &Tensor64, k: &Tensor64, p: f64) -> Tensor64 {
    let hi = x.map(|v| v.powf(p + 1.0));
    let lo = x.map(|v| v.powf(p));
    let num = depthwise_oracle(&hi, k, Padding::Replicate);
    let den = depthwise_oracle(&lo, k, Padding::Replicate);
    num.zip_map(&den, |a, b| a / b)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-6;

/// Worst relative error between tape gradients and central differences of
/// `L = sum(out * r)` for fixed random weights `r`. At most `max_checks`
/// randomly chosen entries of each input are probed.
pub fn grad_check(
    inputs: &[Tensor64],
    seed: u64,
    max_checks: usize,
    build: impl Fn(&mut Tape64, &[Var]) -> Result<Var>,
) -> f64 {
    let mut r = rng(seed);
    let forward = |xs: &[Tensor64], weights: Option<&Tensor64>| -> (f64, Tensor64, Tape64, Vec<Var>, Var) {
        let mut tape = Tape64::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("forward succeeds");
        let shape = tape.shape(out).to_vec();
        let w = weights.cloned().unwrap_or_else(|| Tensor64::ones(&shape));
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).data()[0], w, tape, vars, loss)
    };
    let shape_probe = forward(inputs, None);
    let out_shape = shape_probe.1.shape().to_vec();
    let weights = uniform(&mut r, &out_shape, 0.5, 1.5);
    let (_, _, tape, vars, loss) = forward(inputs, Some(&weights));
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor64::zeros(x.shape()));
        let mut idx: Vec<usize> = (0..x.len()).collect();
        if idx.len() > max_checks {
            use rand::seq::SliceRandom;
            idx.shuffle(&mut r);
            idx.truncate(max_checks);
        }
        for j in idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = forward(&xs, Some(&weights)).0;
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = forward(&xs, Some(&weights)).0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}
