//! `filter`: one morphological operator applied to a MORV1 volume.

use std::path::PathBuf;

use morphgrad::data::{load_volume, save_volume, VolumeSample};
use morphgrad::morphology::{filter, MorphOp, StructElement};
use morphgrad::{Error, Tensor};

use crate::fail::Failure;
use crate::pgm;

pub struct Args {
    pub input: PathBuf,
    pub op: String,
    pub implementation: String,
    pub power: Option<f64>,
    pub window: String,
    pub out: PathBuf,
    pub slice_pgm: Option<PathBuf>,
}

fn parse_op(s: &str) -> Result<MorphOp, Failure> {
    match s {
        "erode" => Ok(MorphOp::Erosion),
        "dilate" => Ok(MorphOp::Dilation),
        "open" => Ok(MorphOp::Opening),
        "close" => Ok(MorphOp::Closing),
        _ => Err(Failure::config(format!(
            "unknown --op {s:?}; expected erode|dilate|open|close"
        ))),
    }
}

/// Parses `d,h,w` or a single extent `k` meaning `k,k,k`.
pub fn parse_window(s: &str) -> Result<[usize; 3], Failure> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::config(format!("--window {s:?} is not a list of integers")))?;
    match parts[..] {
        [k] => Ok([k, k, k]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(Failure::config(format!("--window {s:?} needs one or three extents"))),
    }
}

/// Adds `(channel, z, y, x)` coordinates to voxel-indexed errors.
fn locate(e: Error, shape: [usize; 5]) -> Error {
    let [_, c, d, h, w] = shape;
    let at = |index: usize, detail: String| {
        let r = index % (d * h * w);
        format!(
            "{detail} (channel {}, voxel z={} y={} x={})",
            (index / (d * h * w)) % c,
            r / (h * w),
            (r / w) % h,
            r % w
        )
    };
    match e {
        Error::Domain { op, index, detail } => Error::Domain { op, index, detail: at(index, detail) },
        Error::Numerical { op, index, detail } => {
            Error::Numerical { op, index, detail: at(index, detail) }
        }
        other => other,
    }
}

pub fn run(args: &Args) -> Result<(), Failure> {
    let op = parse_op(&args.op)?;
    let window = parse_window(&args.window)?;
    let sample = load_volume(&args.input)?;
    let c = sample.channels();
    let [d, h, w] = sample.dims();
    let shape = [1, c, d, h, w];
    let x = sample.image.clone().reshape(shape.to_vec())?;
    let (se, power) = match args.implementation.as_str() {
        "flat" => {
            if args.power.is_some() {
                return Err(Failure::config("--p only applies to --impl chm"));
            }
            (StructElement::flat(window)?, 1.0)
        }
        "chm" => {
            let p = args.power.unwrap_or(1.0);
            if !p.is_finite() {
                return Err(Failure::config("--p must be finite"));
            }
            (StructElement::chm_uniform(c, window)?, p)
        }
        other => {
            return Err(Failure::config(format!("unknown --impl {other:?}; expected flat|chm")))
        }
    };
    let y = filter(&x, op, &se, power).map_err(|e| locate(e, shape))?;
    let out = VolumeSample {
        image: Tensor::new(vec![c, d, h, w], y.into_data())?,
        ..sample
    };
    save_volume(&args.out, &out)?;
    if let Some(dir) = &args.slice_pgm {
        let stem = args
            .out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into());
        for p in pgm::write_mid_slices(dir, &stem, [d, h, w], &out.image.data()[..d * h * w])? {
            println!("wrote {}", p.display());
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
