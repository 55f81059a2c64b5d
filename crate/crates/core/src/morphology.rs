//! Grayscale morphology as differentiable tape operations.
//!
//! Flat operators are sliding minima / maxima over a cubic window. The
//! counter-harmonic-mean (CHM) family replaces them with the smooth ratio
//! `(I^(P+1) * w) / (I^P * w)` of two depthwise convolutions, which tends to
//! dilation as `P -> +inf` and to erosion as `P -> -inf`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv::{check_odd_window, Padding};
use crate::kernels::extremum::ExtremumKind;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest admissible CHM denominator magnitude.
pub const CHM_MIN_DENOMINATOR: f64 = 1e-12;

/// The four composite operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erosion,
    Dilation,
    Opening,
    Closing,
}

impl MorphOp {
    pub const ALL: [MorphOp; 4] = [
        MorphOp::Erosion,
        MorphOp::Dilation,
        MorphOp::Opening,
        MorphOp::Closing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MorphOp::Erosion => "erosion",
            MorphOp::Dilation => "dilation",
            MorphOp::Opening => "opening",
            MorphOp::Closing => "closing",
        }
    }
}

/// A structuring element: a flat cubic window, or a learnable CHM kernel of
/// shape `[C,1,kd,kh,kw]` applied depthwise.
#[derive(Clone, Debug, PartialEq)]
pub struct StructElement<S> {
    window: [usize; 3],
    weights: Option<Tensor<S>>,
}

impl<S: Scalar> StructElement<S> {
    pub fn flat(window: [usize; 3]) -> Result<Self> {
        check_odd_window("struct_element", window)?;
        Ok(Self {
            window,
            weights: None,
        })
    }

    pub fn chm(weights: Tensor<S>) -> Result<Self> {
        let window = match weights.shape() {
            &[_, 1, kd, kh, kw] => [kd, kh, kw],
            other => {
                return Err(Error::shape(
                    "struct_element",
                    format!("CHM weights must be [C,1,kd,kh,kw], got {other:?}"),
                ))
            }
        };
        check_odd_window("struct_element", window)?;
        if let Some(i) = weights.first_non_finite() {
            return Err(Error::NonFinite(format!("CHM weight {i} is not finite")));
        }
        Ok(Self {
            window,
            weights: Some(weights),
        })
    }

    /// Every weight equal to `1 / window volume`.
    pub fn chm_uniform(channels: usize, window: [usize; 3]) -> Result<Self> {
        check_odd_window("struct_element", window)?;
        let taps = window.iter().product::<usize>();
        let shape = [channels, 1, window[0], window[1], window[2]];
        Self::chm(Tensor::full(&shape, S::one() / S::of_usize(taps)))
    }

    pub fn window(&self) -> [usize; 3] {
        self.window
    }

    pub fn is_flat(&self) -> bool {
        self.weights.is_none()
    }

    pub fn weights(&self) -> Option<&Tensor<S>> {
        self.weights.as_ref()
    }
}

/// CHM kernel initialization: `1 / window volume`, jittered by up to 10%.
pub fn init_chm_kernel<S: Scalar>(
    channels: usize,
    window: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    check_odd_window("init_chm_kernel", window)?;
    let taps = window.iter().product::<usize>();
    let base = 1.0 / taps as f64;
    let shape = [channels, 1, window[0], window[1], window[2]];
    Ok(Tensor::from_fn(&shape, |_| {
        S::of(base * (1.0 + rng.gen_range(-0.1..0.1)))
    }))
}

// -- flat operators on the tape ---------------------------------------------

pub fn erode<S: Scalar>(tape: &mut Tape<S>, x: Var, window: [usize; 3]) -> Result<Var> {
    tape.sliding_extremum(x, ExtremumKind::Min, window, None)
}

pub fn dilate<S: Scalar>(tape: &mut Tape<S>, x: Var, window: [usize; 3]) -> Result<Var> {
    tape.sliding_extremum(x, ExtremumKind::Max, window, None)
}

pub fn open<S: Scalar>(tape: &mut Tape<S>, x: Var, window: [usize; 3]) -> Result<Var> {
    let e = erode(tape, x, window)?;
    dilate(tape, e, window)
}

pub fn close<S: Scalar>(tape: &mut Tape<S>, x: Var, window: [usize; 3]) -> Result<Var> {
    let d = dilate(tape, x, window)?;
    erode(tape, d, window)
}

// -- CHM operators on the tape ----------------------------------------------

fn check_positive<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    op: &'static str,
    intermediate: bool,
) -> Result<()> {
    let data = tape.value(x).data();
    match data.iter().position(|&v| !(v > S::zero())) {
        None => Ok(()),
        Some(index) => {
            let detail = format!("voxel value {} is not strictly positive", data[index]);
            Err(if intermediate {
                Error::Numerical { op, index, detail }
            } else {
                Error::Domain { op, index, detail }
            })
        }
    }
}

fn chm_ratio<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    kernel: Var,
    power: S,
    intermediate: bool,
) -> Result<Var> {
    const OP: &str = "chm";
    check_positive(tape, x, OP, intermediate)?;
    let hi = tape.pow(x, power + S::one())?;
    let lo = tape.pow(x, power)?;
    let num = tape.depthwise_conv3d(hi, kernel, Padding::Replicate)?;
    let den = tape.depthwise_conv3d(lo, kernel, Padding::Replicate)?;
    let floor = S::of(CHM_MIN_DENOMINATOR);
    let dv = tape.value(den).data();
    if let Some(index) = dv.iter().position(|v| !(v.abs() >= floor)) {
        return Err(Error::Numerical {
            op: OP,
            index,
            detail: format!("denominator {} below {CHM_MIN_DENOMINATOR:e}", dv[index]),
        });
    }
    tape.div(num, den)
}

/// Generalized CHM filter `(I^(P+1) * w) / (I^P * w)`.
pub fn chm_general<S: Scalar>(tape: &mut Tape<S>, x: Var, kernel: Var, power: S) -> Result<Var> {
    chm_ratio(tape, x, kernel, power, false)
}

pub fn chm_erode<S: Scalar>(tape: &mut Tape<S>, x: Var, kernel: Var) -> Result<Var> {
    chm_general(tape, x, kernel, -S::one())
}

pub fn chm_dilate<S: Scalar>(tape: &mut Tape<S>, x: Var, kernel: Var) -> Result<Var> {
    chm_general(tape, x, kernel, S::one())
}

pub fn chm_open<S: Scalar>(tape: &mut Tape<S>, x: Var, kernel: Var) -> Result<Var> {
    let e = chm_erode(tape, x, kernel)?;
    chm_ratio(tape, e, kernel, S::one(), true)
}

pub fn chm_close<S: Scalar>(tape: &mut Tape<S>, x: Var, kernel: Var) -> Result<Var> {
    let d = chm_dilate(tape, x, kernel)?;
    chm_ratio(tape, d, kernel, -S::one(), true)
}

/// Operator implementation bound to a tape.
#[derive(Clone, Copy, Debug)]
pub enum Filter<S> {
    Flat([usize; 3]),
    /// CHM with exponent magnitude `power`: erosion uses `-power`, dilation
    /// `+power`.
    Chm { kernel: Var, power: S },
}

pub fn apply<S: Scalar>(tape: &mut Tape<S>, x: Var, op: MorphOp, filter: Filter<S>) -> Result<Var> {
    match filter {
        Filter::Flat(window) => match op {
            MorphOp::Erosion => erode(tape, x, window),
            MorphOp::Dilation => dilate(tape, x, window),
            MorphOp::Opening => open(tape, x, window),
            MorphOp::Closing => close(tape, x, window),
        },
        Filter::Chm { kernel, power } => {
            let p = power.abs();
            match op {
                MorphOp::Erosion => chm_general(tape, x, kernel, -p),
                MorphOp::Dilation => chm_general(tape, x, kernel, p),
                MorphOp::Opening => {
                    let e = chm_general(tape, x, kernel, -p)?;
                    chm_ratio(tape, e, kernel, p, true)
                }
                MorphOp::Closing => {
                    let d = chm_general(tape, x, kernel, p)?;
                    chm_ratio(tape, d, kernel, -p, true)
                }
            }
        }
    }
}

// -- eager helpers -----------------------------------------------------------

/// Applies `op` to a tensor without gradient tracking. CHM elements use
/// exponent magnitude `power`.
pub fn filter<S: Scalar>(
    input: &Tensor<S>,
    op: MorphOp,
    se: &StructElement<S>,
    power: S,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let f = match se.weights() {
        None => Filter::Flat(se.window()),
        Some(w) => Filter::Chm {
            kernel: tape.constant(w.clone()),
            power,
        },
    };
    let y = apply(&mut tape, x, op, f)?;
    Ok(tape.value(y).clone())
}

fn flat_only<S: Scalar>(se: &StructElement<S>, op: &str) -> Result<[usize; 3]> {
    if se.is_flat() {
        Ok(se.window())
    } else {
        Err(Error::usage(format!("{op} needs a flat structuring element")))
    }
}

fn chm_only<'a, S: Scalar>(se: &'a StructElement<S>, op: &str) -> Result<&'a Tensor<S>> {
    se.weights()
        .ok_or_else(|| Error::usage(format!("{op} needs a CHM structuring element")))
}

pub fn erode_flat<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    flat_only(se, "erode_flat")?;
    filter(input, MorphOp::Erosion, se, S::one())
}

pub fn dilate_flat<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    flat_only(se, "dilate_flat")?;
    filter(input, MorphOp::Dilation, se, S::one())
}

pub fn open_flat<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    flat_only(se, "open_flat")?;
    filter(input, MorphOp::Opening, se, S::one())
}

pub fn close_flat<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    flat_only(se, "close_flat")?;
    filter(input, MorphOp::Closing, se, S::one())
}

fn eager_chm<S: Scalar>(
    input: &Tensor<S>,
    se: &StructElement<S>,
    op: &str,
    f: impl FnOnce(&mut Tape<S>, Var, Var) -> Result<Var>,
) -> Result<Tensor<S>> {
    let w = chm_only(se, op)?.clone();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(w);
    let y = f(&mut tape, x, k)?;
    Ok(tape.value(y).clone())
}

pub fn chm_erode_eager<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    eager_chm(input, se, "chm_erode", chm_erode)
}

pub fn chm_dilate_eager<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    eager_chm(input, se, "chm_dilate", chm_dilate)
}

pub fn chm_open_eager<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    eager_chm(input, se, "chm_open", chm_open)
}

pub fn chm_close_eager<S: Scalar>(input: &Tensor<S>, se: &StructElement<S>) -> Result<Tensor<S>> {
    eager_chm(input, se, "chm_close", chm_close)
}

pub fn chm_general_eager<S: Scalar>(
    input: &Tensor<S>,
    se: &StructElement<S>,
    power: S,
) -> Result<Tensor<S>> {
    eager_chm(input, se, "chm_general", |t, x, k| chm_general(t, x, k, power))
}
