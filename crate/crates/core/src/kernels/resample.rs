//! Nearest-neighbor upsampling.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn upsample_nearest<S: Scalar>(input: &Tensor<S>, factor: [usize; 3]) -> Result<Tensor<S>> {
    let [n, c, d, h, w] = input.dims5("upsample_nearest")?;
    let [fd, fh, fw] = factor;
    let [od, oh, ow] = [d * fd, h * fh, w * fw];
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                let row = &src[base + ((z / fd) * h + y / fh) * w..][..w];
                for x in 0..ow {
                    out.push(row[x / fw]);
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sums each output block into its source voxel.
pub fn upsample_nearest_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input_shape: &[usize],
    factor: [usize; 3],
) -> Result<Tensor<S>> {
    let [n, c, d, h, w] = grad_out.dims5("upsample_nearest_backward")?;
    let [fd, fh, fw] = factor;
    let [id, ih, iw] = [d / fd, h / fh, w / fw];
    let g = grad_out.data();
    let mut out = vec![S::zero(); n * c * id * ih * iw];
    for nc in 0..n * c {
        for z in 0..d {
            for y in 0..h {
                let grow = &g[((nc * d + z) * h + y) * w..][..w];
                let dst = &mut out[((nc * id + z / fd) * ih + y / fh) * iw..][..iw];
                for (x, &v) in grow.iter().enumerate() {
                    dst[x / fw] += v;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}
