//! Instance normalization and channel softmax.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standardized values and per-slice inverse standard deviations.
pub struct InstanceNormSaved<S> {
    pub normalized: Vec<S>,
    pub inv_std: Vec<S>,
}

fn slices<S: Scalar>(x: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    let shape = x.shape();
    if shape.len() < 3 {
        return Err(Error::shape(
            op,
            format!("expected [N,C,spatial...], got {shape:?}"),
        ));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Normalizes every `(batch, channel)` slice to zero mean and unit
/// (biased) variance, then applies the per-channel affine map.
pub fn instance_norm<S: Scalar>(
    x: &Tensor<S>,
    scale: &Tensor<S>,
    shift: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, InstanceNormSaved<S>)> {
    let (n, c, m) = slices(x, "instance_norm")?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            "instance_norm",
            format!(
                "scale/shift need {c} entries, got {} and {}",
                scale.len(),
                shift.len()
            ),
        ));
    }
    if m < 2 {
        return Err(Error::shape(
            "instance_norm",
            "each (batch, channel) slice needs at least 2 voxels",
        ));
    }
    let mf = S::of_usize(m);
    let mut normalized = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for s in 0..n * c {
        let ch = s % c;
        let src = &x.data()[s * m..(s + 1) * m];
        let mean = src.iter().copied().sum::<S>() / mf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / mf;
        let inv = S::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let (a, b) = (scale.data()[ch], shift.data()[ch]);
        for i in 0..m {
            let xh = (src[i] - mean) * inv;
            normalized[s * m + i] = xh;
            out[s * m + i] = a * xh + b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        InstanceNormSaved {
            normalized,
            inv_std,
        },
    ))
}

/// Returns gradients for `(x, scale, shift)`.
pub fn instance_norm_backward<S: Scalar>(
    x_shape: &[usize],
    scale: &Tensor<S>,
    saved: &InstanceNormSaved<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = x_shape[0];
    let c = x_shape[1];
    let m: usize = x_shape[2..].iter().product();
    let mf = S::of_usize(m);
    let g = grad_out.data();
    let mut gx = vec![S::zero(); g.len()];
    let mut gscale = vec![S::zero(); c];
    let mut gshift = vec![S::zero(); c];
    for s in 0..n * c {
        let ch = s % c;
        let xh = &saved.normalized[s * m..(s + 1) * m];
        let gs = &g[s * m..(s + 1) * m];
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for i in 0..m {
            sum_g += gs[i];
            sum_gx += gs[i] * xh[i];
        }
        gscale[ch] += sum_gx;
        gshift[ch] += sum_g;
        let a = scale.data()[ch];
        let k = a * saved.inv_std[s] / mf;
        for i in 0..m {
            gx[s * m + i] = k * (mf * gs[i] - sum_g - xh[i] * sum_gx);
        }
    }
    (
        Tensor::new(x_shape.to_vec(), gx).expect("shape preserved"),
        Tensor::new(scale.shape().to_vec(), gscale).expect("shape preserved"),
        Tensor::new(scale.shape().to_vec(), gshift).expect("shape preserved"),
    )
}

/// Softmax across the channel axis of an `[N,C,spatial...]` tensor.
pub fn softmax_channels<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, m) = slices(x, "softmax")?;
    let src = x.data();
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        let base = b * c * m;
        for i in 0..m {
            let mut mx = S::neg_infinity();
            for k in 0..c {
                mx = mx.max(src[base + k * m + i]);
            }
            let mut total = S::zero();
            for k in 0..c {
                let e = (src[base + k * m + i] - mx).exp();
                out[base + k * m + i] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * m + i] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<S: Scalar>(y: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let shape = y.shape();
    let (n, c) = (shape[0], shape[1]);
    let m: usize = shape[2..].iter().product();
    let (yv, g) = (y.data(), grad_out.data());
    let mut out = vec![S::zero(); y.len()];
    for b in 0..n {
        let base = b * c * m;
        for i in 0..m {
            let mut inner = S::zero();
            for k in 0..c {
                inner += yv[base + k * m + i] * g[base + k * m + i];
            }
            for k in 0..c {
                let j = base + k * m + i;
                out[j] = yv[j] * (g[j] - inner);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}
