//! 3-D cross-correlation with "same" padding.
//!
//! The kernel is not flipped. Output extents are `ceil(extent / stride)`; with
//! stride 1 the output voxel `x` is centered on input voxel `x`.

use serde::{Deserialize, Serialize};

use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    Replicate,
}

/// Checks that every window extent is odd and nonzero.
pub fn check_odd_window(op: &'static str, window: [usize; 3]) -> Result<()> {
    if window.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(Error::config(format!(
            "{op}: window extents must be odd, got {window:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    padded: [usize; 3],
}

impl Geom {
    fn new<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, stride: usize) -> Result<Self> {
        let [n, cin, d, h, w] = input.dims5("conv3d")?;
        let [cout, kcin, kd, kh, kw] = kernel.dims5("conv3d")?;
        if kcin != cin {
            return Err(Error::shape(
                "conv3d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        check_odd_window("conv3d", [kd, kh, kw])?;
        if stride == 0 {
            return Err(Error::config("conv3d: stride must be >= 1"));
        }
        let k = [kd, kh, kw];
        let dims = [d, h, w];
        Ok(Self {
            n,
            cin,
            cout,
            dims,
            k,
            out: dims.map(|e| e.div_ceil(stride)),
            padded: [d + kd - 1, h + kh - 1, w + kw - 1],
        })
    }

    fn taps(&self) -> usize {
        self.k.iter().product()
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
}

/// Copies each `[D,H,W]` volume of an `[N*C]` stack into a border-padded
/// buffer, `radius` voxels on each side.
pub fn pad_volumes<S: Scalar>(
    data: &[S],
    volumes: usize,
    dims: [usize; 3],
    radius: [usize; 3],
    padding: Padding,
) -> Vec<S> {
    let [d, h, w] = dims;
    let [pd, ph, pw] = [d + 2 * radius[0], h + 2 * radius[1], w + 2 * radius[2]];
    let vol = d * h * w;
    let pvol = pd * ph * pw;
    let mut out = vec![S::zero(); volumes * pvol];
    for v in 0..volumes {
        let src = &data[v * vol..(v + 1) * vol];
        let dst = &mut out[v * pvol..(v + 1) * pvol];
        for pz in 0..pd {
            let z = match source_index(pz, radius[0], d, padding) {
                Some(z) => z,
                None => continue,
            };
            for py in 0..ph {
                let y = match source_index(py, radius[1], h, padding) {
                    Some(y) => y,
                    None => continue,
                };
                let row = &src[(z * h + y) * w..(z * h + y + 1) * w];
                let drow = &mut dst[(pz * ph + py) * pw..(pz * ph + py + 1) * pw];
                let r = radius[2];
                drow[r..r + w].copy_from_slice(row);
                if padding == Padding::Replicate {
                    for px in 0..r {
                        drow[px] = row[0];
                        drow[r + w + px] = row[w - 1];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates a padded-buffer gradient back onto the unpadded volumes.
pub fn fold_padded_grad<S: Scalar>(
    padded: &[S],
    volumes: usize,
    dims: [usize; 3],
    radius: [usize; 3],
    padding: Padding,
) -> Vec<S> {
    let [d, h, w] = dims;
    let [pd, ph, pw] = [d + 2 * radius[0], h + 2 * radius[1], w + 2 * radius[2]];
    let vol = d * h * w;
    let pvol = pd * ph * pw;
    let mut out = vec![S::zero(); volumes * vol];
    for v in 0..volumes {
        let src = &padded[v * pvol..(v + 1) * pvol];
        let dst = &mut out[v * vol..(v + 1) * vol];
        for pz in 0..pd {
            let Some(z) = source_index(pz, radius[0], d, padding) else {
                continue;
            };
            for py in 0..ph {
                let Some(y) = source_index(py, radius[1], h, padding) else {
                    continue;
                };
                for px in 0..pw {
                    let Some(x) = source_index(px, radius[2], w, padding) else {
                        continue;
                    };
                    dst[(z * h + y) * w + x] += src[(pz * ph + py) * pw + px];
                }
            }
        }
    }
    out
}

#[inline]
fn source_index(p: usize, radius: usize, extent: usize, padding: Padding) -> Option<usize> {
    let i = p as isize - radius as isize;
    if (0..extent as isize).contains(&i) {
        Some(i as usize)
    } else {
        match padding {
            Padding::Zero => None,
            Padding::Replicate => Some(i.clamp(0, extent as isize - 1) as usize),
        }
    }
}

// Outputs are computed on the padded grid: output (oz, oy, ox) lives at
// j = (oz * ph + oy) * pw + ox, and tap (tz, ty, tx) then reads padded input
// element `stride * j + (tz * ph + ty) * pw + tx`, so every tap is a constant
// offset into a contiguous (or uniformly strided) range.

/// Output channels per register block.
const CB: usize = 8;
/// Grid positions per register block.
const JB: usize = 8;
/// Output channels per block in the kernel-gradient reduction.
const KB: usize = 4;

impl Geom {
    /// Number of padded-grid positions spanned by valid outputs.
    fn grid_len(&self) -> usize {
        let [od, oh, ow] = self.out;
        let [_, ph, pw] = self.padded;
        ((od - 1) * ph + (oh - 1)) * pw + ow
    }

    fn tap_offsets(&self) -> Vec<usize> {
        let [kd, kh, kw] = self.k;
        let [_, ph, pw] = self.padded;
        let mut offs = Vec::with_capacity(kd * kh * kw);
        for tz in 0..kd {
            for ty in 0..kh {
                for tx in 0..kw {
                    offs.push((tz * ph + ty) * pw + tx);
                }
            }
        }
        offs
    }

    /// Calls `f(grid_index, output_index)` for every valid output voxel.
    fn for_each_output(&self, mut f: impl FnMut(usize, usize)) {
        let [od, oh, ow] = self.out;
        let [_, ph, pw] = self.padded;
        for oz in 0..od {
            for oy in 0..oh {
                let g0 = (oz * ph + oy) * pw;
                let o0 = (oz * oh + oy) * ow;
                for ox in 0..ow {
                    f(g0 + ox, o0 + ox);
                }
            }
        }
    }
}

/// Multi-channel correlation on flat buffers:
/// `dst[d][j] = sum_s sum_t w[(s * taps + t) * dpad + d] * src[s][j * step + offs[t]]`
/// for `j < dst_len`. `dpad` is the destination channel count rounded up to
/// the register block; padded weight columns must be zero.
struct Correlate<'a, S> {
    src: &'a [S],
    src_len: usize,
    src_ch: usize,
    weights: &'a [S],
    offs: &'a [usize],
    step: usize,
    dst_ch: usize,
    dst_len: usize,
}

impl<S: Scalar> Correlate<'_, S> {
    fn run(&self, dst: &mut [S]) {
        let taps = self.offs.len();
        if self.dst_ch < CB {
            self.run_blocked::<1>(dst, taps);
        } else {
            self.run_blocked::<CB>(dst, taps);
        }
    }

    fn run_blocked<const B: usize>(&self, dst: &mut [S], taps: usize) {
        let dpad = self.dst_ch.div_ceil(B) * B;
        debug_assert_eq!(self.weights.len(), self.src_ch * taps * dpad);
        let fast_end = if self.step == 1 {
            self.dst_len - self.dst_len % JB
        } else {
            0
        };
        for d0 in (0..dpad).step_by(B) {
            for j0 in (0..fast_end).step_by(JB) {
                let acc = self.block_contiguous::<B>(d0, dpad, j0, taps);
                self.store(dst, &acc, d0, j0, JB);
            }
            for j0 in (fast_end..self.dst_len).step_by(JB) {
                let valid = JB.min(self.dst_len - j0);
                let acc = self.block_general::<B>(d0, dpad, j0, valid, taps);
                self.store(dst, &acc, d0, j0, valid);
            }
        }
    }

    #[inline(always)]
    fn block_contiguous<const B: usize>(
        &self,
        d0: usize,
        dpad: usize,
        j0: usize,
        taps: usize,
    ) -> [[S; JB]; B] {
        let mut acc = [[S::zero(); JB]; B];
        for s in 0..self.src_ch {
            let src = &self.src[s * self.src_len..(s + 1) * self.src_len];
            let wrow = &self.weights[s * taps * dpad..(s + 1) * taps * dpad];
            for (t, &off) in self.offs.iter().enumerate() {
                let base = j0 + off;
                let p: &[S; JB] = src[base..base + JB].try_into().expect("block length");
                let w: &[S; B] = wrow[t * dpad + d0..t * dpad + d0 + B]
                    .try_into()
                    .expect("block width");
                for c in 0..B {
                    for x in 0..JB {
                        acc[c][x] += w[c] * p[x];
                    }
                }
            }
        }
        acc
    }

    fn block_general<const B: usize>(
        &self,
        d0: usize,
        dpad: usize,
        j0: usize,
        valid: usize,
        taps: usize,
    ) -> [[S; JB]; B] {
        let mut acc = [[S::zero(); JB]; B];
        for s in 0..self.src_ch {
            let src = &self.src[s * self.src_len..(s + 1) * self.src_len];
            let wrow = &self.weights[s * taps * dpad..(s + 1) * taps * dpad];
            for (t, &off) in self.offs.iter().enumerate() {
                let base = j0 * self.step + off;
                let mut p = [S::zero(); JB];
                for (x, v) in p.iter_mut().enumerate().take(valid) {
                    *v = src[base + x * self.step];
                }
                for c in 0..B {
                    let wc = wrow[t * dpad + d0 + c];
                    for x in 0..JB {
                        acc[c][x] += wc * p[x];
                    }
                }
            }
        }
        acc
    }

    fn store<const B: usize>(
        &self,
        dst: &mut [S],
        acc: &[[S; JB]; B],
        d0: usize,
        j0: usize,
        valid: usize,
    ) {
        for (c, row) in acc.iter().enumerate() {
            let d = d0 + c;
            if d < self.dst_ch {
                dst[d * self.dst_len + j0..d * self.dst_len + j0 + valid]
                    .copy_from_slice(&row[..valid]);
            }
        }
    }
}

/// `[Cout, Cin, taps]` kernel as `[(Cin * taps), Cout padded]`, the layout
/// [`Correlate`] expects.
fn forward_weights<S: Scalar>(kernel: &[S], cout: usize, cin: usize, taps: usize) -> Vec<S> {
    let b = if cout < CB { 1 } else { CB };
    let dpad = cout.div_ceil(b) * b;
    let mut w = vec![S::zero(); cin * taps * dpad];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                w[(ci * taps + t) * dpad + co] = kernel[(co * cin + ci) * taps + t];
            }
        }
    }
    w
}

/// Weights for the input-gradient correlation: source channels are output
/// channels, taps are mirrored.
fn adjoint_weights<S: Scalar>(kernel: &[S], cout: usize, cin: usize, taps: usize) -> Vec<S> {
    let b = if cin < CB { 1 } else { CB };
    let dpad = cin.div_ceil(b) * b;
    let mut w = vec![S::zero(); cout * taps * dpad];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                w[(co * taps + (taps - 1 - t)) * dpad + ci] = kernel[(co * cin + ci) * taps + t];
            }
        }
    }
    w
}

pub fn conv3d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<S>> {
    let g = Geom::new(input, kernel, stride)?;
    let radius = g.k.map(|k| k / 2);
    let padded = pad_volumes(input.data(), g.n * g.cin, g.dims, radius, padding);
    let taps = g.taps();
    let plen = g.padded_len();
    let olen = g.out_len();
    let nj = g.grid_len();
    let offs = g.tap_offsets();
    let weights = forward_weights(kernel.data(), g.cout, g.cin, taps);
    let mut grid = vec![S::zero(); g.cout * nj];
    let mut out = vec![S::zero(); g.n * g.cout * olen];
    for n in 0..g.n {
        Correlate {
            src: &padded[n * g.cin * plen..(n + 1) * g.cin * plen],
            src_len: plen,
            src_ch: g.cin,
            weights: &weights,
            offs: &offs,
            step: stride,
            dst_ch: g.cout,
            dst_len: nj,
        }
        .run(&mut grid);
        let on = &mut out[n * g.cout * olen..(n + 1) * g.cout * olen];
        for co in 0..g.cout {
            let src = &grid[co * nj..(co + 1) * nj];
            let dst = &mut on[co * olen..(co + 1) * olen];
            g.for_each_output(|j, o| dst[o] = src[j]);
        }
    }
    let [od, oh, ow] = g.out;
    Tensor::new(vec![g.n, g.cout, od, oh, ow], out)
}

/// `gk[co][ci][t] += sum_j grad[co][j] * src[ci][j * step + offs[t]]`, with
/// `grad[co][j]` stored at `co * gstride + gstart + j` for `j < nj`.
#[allow(clippy::too_many_arguments)]
fn kernel_grad<S: Scalar>(
    grad: &[S],
    gstride: usize,
    gstart: usize,
    nj: usize,
    cout: usize,
    src: &[S],
    plen: usize,
    cin: usize,
    offs: &[usize],
    step: usize,
    gk: &mut [S],
) {
    let taps = offs.len();
    let row = |c: usize| &grad[c * gstride + gstart..c * gstride + gstart + nj];
    // j is tiled so each tile of grad rows stays cache resident across taps
    const TILE: usize = 512;
    for j_lo in (0..nj).step_by(TILE) {
        let j_hi = (j_lo + TILE).min(nj);
        let full = j_lo + (j_hi - j_lo) / JB * JB;
        for ci in 0..cin {
            let p = &src[ci * plen..(ci + 1) * plen];
            for (t, &off) in offs.iter().enumerate() {
                for c0 in (0..cout).step_by(KB) {
                    let cb = KB.min(cout - c0);
                    let mut acc = [[S::zero(); JB]; KB];
                    for j0 in (j_lo..full).step_by(JB) {
                        let base = j0 * step + off;
                        let mut pv = [S::zero(); JB];
                        if step == 1 {
                            pv.copy_from_slice(&p[base..base + JB]);
                        } else {
                            for (x, v) in pv.iter_mut().enumerate() {
                                *v = p[base + x * step];
                            }
                        }
                        for (c, a) in acc.iter_mut().enumerate().take(cb) {
                            let gr: &[S; JB] =
                                row(c0 + c)[j0..j0 + JB].try_into().expect("block length");
                            for x in 0..JB {
                                a[x] += gr[x] * pv[x];
                            }
                        }
                    }
                    for (c, a) in acc.iter_mut().enumerate().take(cb) {
                        for j in full..j_hi {
                            a[j - full] += row(c0 + c)[j] * p[j * step + off];
                        }
                        let total =
                            ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
                        gk[((c0 + c) * cin + ci) * taps + t] += total;
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3d`] with respect to its input and kernel.
pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: Padding,
    stride: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let g = Geom::new(input, kernel, stride)?;
    let radius = g.k.map(|k| k / 2);
    let taps = g.taps();
    let plen = g.padded_len();
    let olen = g.out_len();
    let nj = g.grid_len();
    let offs = g.tap_offsets();
    let off_max = *offs.last().expect("at least one tap");
    let go = grad_out.data();

    // grad_out on the padded grid, shifted right by `off_max` with zero
    // margins so the mirrored-tap correlation never leaves the buffer
    let glen = plen + off_max;
    let mut ggrid = vec![S::zero(); g.n * g.cout * glen];
    for nc in 0..g.n * g.cout {
        let src = &go[nc * olen..(nc + 1) * olen];
        let dst = &mut ggrid[nc * glen + off_max..(nc + 1) * glen];
        g.for_each_output(|j, o| dst[j] = src[o]);
    }

    let grad_kernel = if need_kernel {
        let padded = pad_volumes(input.data(), g.n * g.cin, g.dims, radius, padding);
        let mut gk = vec![S::zero(); kernel.len()];
        for n in 0..g.n {
            kernel_grad(
                &ggrid[n * g.cout * glen..(n + 1) * g.cout * glen],
                glen,
                off_max,
                nj,
                g.cout,
                &padded[n * g.cin * plen..(n + 1) * g.cin * plen],
                plen,
                g.cin,
                &offs,
                stride,
                &mut gk,
            );
        }
        Some(Tensor::new(kernel.shape().to_vec(), gk)?)
    } else {
        None
    };

    let grad_input = if need_input {
        let mut gp = vec![S::zero(); g.n * g.cin * plen];
        // strided outputs are scattered onto the dense padded grid so the
        // stride-1 adjoint applies unchanged
        let dense = if stride == 1 {
            ggrid
        } else {
            let mut dense = vec![S::zero(); g.n * g.cout * glen];
            for nc in 0..g.n * g.cout {
                let src = &ggrid[nc * glen + off_max..nc * glen + off_max + nj];
                let dst = &mut dense[nc * glen + off_max..(nc + 1) * glen];
                for (j, &v) in src.iter().enumerate() {
                    if v != S::zero() {
                        dst[j * stride] = v;
                    }
                }
            }
            dense
        };
        let weights = adjoint_weights(kernel.data(), g.cout, g.cin, taps);
        let mirrored: Vec<usize> = offs.iter().rev().map(|&o| off_max - o).collect();
        for n in 0..g.n {
            Correlate {
                src: &dense[n * g.cout * glen..(n + 1) * g.cout * glen],
                src_len: glen,
                src_ch: g.cout,
                weights: &weights,
                offs: &mirrored,
                step: 1,
                dst_ch: g.cin,
                dst_len: plen,
            }
            .run(&mut gp[n * g.cin * plen..(n + 1) * g.cin * plen]);
        }
        let gi = fold_padded_grad(&gp, g.n * g.cin, g.dims, radius, padding);
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

fn depthwise_geom<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
) -> Result<([usize; 5], [usize; 3])> {
    let dims = input.dims5("depthwise_conv3d")?;
    let [kc, one, kd, kh, kw] = kernel.dims5("depthwise_conv3d")?;
    if kc != dims[1] || one != 1 {
        return Err(Error::shape(
            "depthwise_conv3d",
            format!(
                "kernel must be [C,1,kd,kh,kw] with C = {}, got {:?}",
                dims[1],
                kernel.shape()
            ),
        ));
    }
    check_odd_window("depthwise_conv3d", [kd, kh, kw])?;
    Ok((dims, [kd, kh, kw]))
}

/// Per-channel cross-correlation: channel `c` of the output only sees
/// channel `c` of the input and kernel `c`.
pub fn depthwise_conv3d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: Padding,
) -> Result<Tensor<S>> {
    let ([n, c, d, h, w], k) = depthwise_geom(input, kernel)?;
    let radius = k.map(|e| e / 2);
    let padded = pad_volumes(input.data(), n * c, [d, h, w], radius, padding);
    let [ph, pw] = [h + k[1] - 1, w + k[2] - 1];
    let plen = (d + k[0] - 1) * ph * pw;
    let taps = k.iter().product::<usize>();
    let mut out = vec![S::zero(); input.len()];
    for nc in 0..n * c {
        let ch = nc % c;
        let wts = &kernel.data()[ch * taps..(ch + 1) * taps];
        let pbase = nc * plen;
        for z in 0..d {
            for y in 0..h {
                let dst = &mut out[((nc * d + z) * h + y) * w..][..w];
                for tz in 0..k[0] {
                    for ty in 0..k[1] {
                        let row0 = pbase + ((z + tz) * ph + y + ty) * pw;
                        for tx in 0..k[2] {
                            let wv = wts[(tz * k[1] + ty) * k[2] + tx];
                            axpy(dst, wv, &padded[row0 + tx..row0 + tx + w]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn depthwise_conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: Padding,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let ([n, c, d, h, w], k) = depthwise_geom(input, kernel)?;
    let radius = k.map(|e| e / 2);
    let [ph, pw] = [h + k[1] - 1, w + k[2] - 1];
    let plen = (d + k[0] - 1) * ph * pw;
    let taps = k.iter().product::<usize>();
    let go = grad_out.data();

    let grad_kernel = if need_kernel {
        let padded = pad_volumes(input.data(), n * c, [d, h, w], radius, padding);
        let mut gk = vec![S::zero(); kernel.len()];
        for nc in 0..n * c {
            let ch = nc % c;
            let pbase = nc * plen;
            for z in 0..d {
                for y in 0..h {
                    let grow = &go[((nc * d + z) * h + y) * w..][..w];
                    for tz in 0..k[0] {
                        for ty in 0..k[1] {
                            let row0 = pbase + ((z + tz) * ph + y + ty) * pw;
                            for tx in 0..k[2] {
                                let t = (tz * k[1] + ty) * k[2] + tx;
                                gk[ch * taps + t] += dot(grow, &padded[row0 + tx..row0 + tx + w]);
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(kernel.shape().to_vec(), gk)?)
    } else {
        None
    };

    let grad_input = if need_input {
        let mut gp = vec![S::zero(); n * c * plen];
        for nc in 0..n * c {
            let ch = nc % c;
            let wts = &kernel.data()[ch * taps..(ch + 1) * taps];
            let pbase = nc * plen;
            for z in 0..d {
                for y in 0..h {
                    let grow = &go[((nc * d + z) * h + y) * w..][..w];
                    for tz in 0..k[0] {
                        for ty in 0..k[1] {
                            let row0 = pbase + ((z + tz) * ph + y + ty) * pw;
                            for tx in 0..k[2] {
                                let wv = wts[(tz * k[1] + ty) * k[2] + tx];
                                axpy(&mut gp[row0 + tx..row0 + tx + w], wv, grow);
                            }
                        }
                    }
                }
            }
        }
        let gi = fold_padded_grad(&gp, n * c, [d, h, w], radius, padding);
        Some(Tensor::new(input.shape().to_vec(), gi)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}
