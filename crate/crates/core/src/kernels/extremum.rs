//! Sliding-window minimum / maximum over `[N,C,D,H,W]` volumes.
//!
//! Windows are centered and truncated at the volume border, which is the same
//! as padding with `+inf` for the minimum and `-inf` for the maximum.

use super::conv::check_odd_window;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExtremumKind {
    Min,
    Max,
}

impl ExtremumKind {
    /// Value contributed by voxel `v` given the structuring-element offset.
    #[inline]
    fn shifted<S: Scalar>(self, value: S, offset: S) -> S {
        match self {
            ExtremumKind::Min => value - offset,
            ExtremumKind::Max => value + offset,
        }
    }

    #[inline]
    fn better<S: Scalar>(self, candidate: S, best: S) -> bool {
        match self {
            ExtremumKind::Min => candidate < best,
            ExtremumKind::Max => candidate > best,
        }
    }

    fn identity<S: Scalar>(self) -> S {
        match self {
            ExtremumKind::Min => S::infinity(),
            ExtremumKind::Max => S::neg_infinity(),
        }
    }

    #[inline]
    fn pick<S: Scalar>(self, a: S, b: S) -> S {
        match self {
            ExtremumKind::Min => a.min(b),
            ExtremumKind::Max => a.max(b),
        }
    }
}

fn check_args<S: Scalar>(
    input: &Tensor<S>,
    window: [usize; 3],
    offsets: Option<&Tensor<S>>,
) -> Result<[usize; 5]> {
    let dims = input.dims5("sliding_extremum")?;
    check_odd_window("sliding_extremum", window)?;
    if let Some(off) = offsets {
        if off.shape() != window {
            return Err(Error::shape(
                "sliding_extremum",
                format!(
                    "offsets shape {:?} must equal window {window:?}",
                    off.shape()
                ),
            ));
        }
    }
    Ok(dims)
}

/// Half-open range of in-volume positions covered by a window centered at `x`.
#[inline]
fn window_range(x: usize, radius: usize, extent: usize) -> std::ops::Range<usize> {
    x.saturating_sub(radius)..(x + radius + 1).min(extent)
}

/// Direct window scan. Ties keep the first voxel in row-major order.
pub fn sliding_extremum_naive<S: Scalar>(
    input: &Tensor<S>,
    kind: ExtremumKind,
    window: [usize; 3],
    offsets: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let [n, c, d, h, w] = check_args(input, window, offsets)?;
    let r = window.map(|k| k / 2);
    let src = input.data();
    let vol = d * h * w;
    let mut out = vec![S::zero(); input.len()];
    for nc in 0..n * c {
        let base = nc * vol;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut best: Option<S> = None;
                    for vz in window_range(z, r[0], d) {
                        for vy in window_range(y, r[1], h) {
                            for vx in window_range(x, r[2], w) {
                                let value = src[base + (vz * h + vy) * w + vx];
                                let cand = match offsets {
                                    Some(off) => {
                                        let t = ((vz + r[0] - z) * window[1] + vy + r[1] - y)
                                            * window[2]
                                            + vx
                                            + r[2]
                                            - x;
                                        kind.shifted(value, off.data()[t])
                                    }
                                    None => value,
                                };
                                best = match best {
                                    Some(b) if !kind.better(cand, b) => Some(b),
                                    _ => Some(cand),
                                };
                            }
                        }
                    }
                    out[base + (z * h + y) * w + x] = best.expect("window contains its center");
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Flat-window fast path: three 1-D van Herk / Gil-Werman passes, O(1)
/// comparisons per voxel per axis independent of window size.
pub fn sliding_extremum_separable<S: Scalar>(
    input: &Tensor<S>,
    kind: ExtremumKind,
    window: [usize; 3],
) -> Result<Tensor<S>> {
    let [n, c, d, h, w] = check_args(input, window, None)?;
    let mut data = input.data().to_vec();
    let vol = d * h * w;
    let mut line = LineFilter::new(kind);
    // (axis extent, stride, window extent) for the x, y and z passes
    let passes = [(w, 1, window[2]), (h, w, window[1]), (d, h * w, window[0])];
    for (extent, stride, k) in passes {
        if k == 1 {
            continue;
        }
        for nc in 0..n * c {
            let vbase = nc * vol;
            for start in line_starts(d, h, w, stride) {
                line.run(&mut data, vbase + start, stride, extent, k);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), data)
}

/// Offsets of the first voxel of every line along the axis with `stride`.
fn line_starts(d: usize, h: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let on_axis_origin = if stride == 1 {
                    x == 0
                } else if stride == w {
                    y == 0
                } else {
                    z == 0
                };
                if on_axis_origin {
                    starts.push(idx);
                }
            }
        }
    }
    starts
}

struct LineFilter<S> {
    kind: ExtremumKind,
    buf: Vec<S>,
    prefix: Vec<S>,
    suffix: Vec<S>,
}

impl<S: Scalar> LineFilter<S> {
    fn new(kind: ExtremumKind) -> Self {
        Self {
            kind,
            buf: Vec::new(),
            prefix: Vec::new(),
            suffix: Vec::new(),
        }
    }

    fn run(&mut self, data: &mut [S], start: usize, stride: usize, len: usize, k: usize) {
        let r = k / 2;
        let total = (len + 2 * r).div_ceil(k) * k;
        let ident = self.kind.identity::<S>();
        self.buf.clear();
        self.buf.resize(total, ident);
        for i in 0..len {
            self.buf[r + i] = data[start + i * stride];
        }
        self.prefix.clear();
        self.prefix.resize(total, ident);
        self.suffix.clear();
        self.suffix.resize(total, ident);
        for i in 0..total {
            self.prefix[i] = if i % k == 0 {
                self.buf[i]
            } else {
                self.kind.pick(self.prefix[i - 1], self.buf[i])
            };
        }
        for i in (0..total).rev() {
            self.suffix[i] = if i % k == k - 1 {
                self.buf[i]
            } else {
                self.kind.pick(self.suffix[i + 1], self.buf[i])
            };
        }
        for j in 0..len {
            data[start + j * stride] = self.kind.pick(self.suffix[j], self.prefix[j + 2 * r]);
        }
    }
}

/// Forward extremum; uses the separable path for flat windows.
pub fn sliding_extremum<S: Scalar>(
    input: &Tensor<S>,
    kind: ExtremumKind,
    window: [usize; 3],
    offsets: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    match offsets {
        None => sliding_extremum_separable(input, kind, window),
        Some(_) => sliding_extremum_naive(input, kind, window, offsets),
    }
}

/// Routes each output gradient to the first voxel (row-major) whose shifted
/// value equals the output, and to the matching offset entry.
pub fn sliding_extremum_backward<S: Scalar>(
    input: &Tensor<S>,
    output: &Tensor<S>,
    kind: ExtremumKind,
    window: [usize; 3],
    offsets: Option<&Tensor<S>>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let [n, c, d, h, w] = check_args(input, window, offsets)?;
    let r = window.map(|k| k / 2);
    let src = input.data();
    let vol = d * h * w;
    let mut gin = vec![S::zero(); input.len()];
    let mut goff = offsets.map(|o| vec![S::zero(); o.len()]);
    let sign = match kind {
        ExtremumKind::Min => -S::one(),
        ExtremumKind::Max => S::one(),
    };
    for nc in 0..n * c {
        let base = nc * vol;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let o = base + (z * h + y) * w + x;
                    let target = output.data()[o];
                    let g = grad_out.data()[o];
                    let mut hit = None;
                    'scan: for vz in window_range(z, r[0], d) {
                        for vy in window_range(y, r[1], h) {
                            for vx in window_range(x, r[2], w) {
                                let vi = base + (vz * h + vy) * w + vx;
                                let t = ((vz + r[0] - z) * window[1] + vy + r[1] - y) * window[2]
                                    + vx
                                    + r[2]
                                    - x;
                                let cand = match offsets {
                                    Some(off) => kind.shifted(src[vi], off.data()[t]),
                                    None => src[vi],
                                };
                                if cand == target {
                                    hit = Some((vi, t));
                                    break 'scan;
                                }
                            }
                        }
                    }
                    let (vi, t) = hit.ok_or_else(|| Error::Numerical {
                        op: "sliding_extremum_backward",
                        index: o,
                        detail: "output value not found in its window".into(),
                    })?;
                    gin[vi] += g;
                    if let Some(go) = goff.as_mut() {
                        go[t] += sign * g;
                    }
                }
            }
        }
    }
    let gin = Tensor::new(input.shape().to_vec(), gin)?;
    let goff = match goff {
        Some(v) => Some(Tensor::new(window.to_vec(), v)?),
        None => None,
    };
    Ok((gin, goff))
}
