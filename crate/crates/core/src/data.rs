//! Synthetic nested-ellipsoid volumes, intensity normalization and the MORV1
//! volume file format.
//!
//! A MORV1 file is the 5-byte magic `MORV1`, one JSON manifest line ending
//! in `\n`, then the little-endian `f64` image (`[C,D,H,W]`, row-major)
//! followed by the label volume (`[D,H,W]`) stored as `f64` class ids.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 5] = b"MORV1";
const MAX_ATTEMPTS: usize = 1000;

/// An image with its voxel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[C,D,H,W]`.
    pub image: Tensor<f64>,
    /// `[D,H,W]` class ids.
    pub label: Tensor<f64>,
    pub id: String,
    pub num_classes: usize,
}

impl VolumeSample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.label.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// The image as a batch of one, `[1,C,D,H,W]`.
    pub fn batch(&self) -> Tensor<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image.shape());
        self.image.clone().reshape(shape).expect("same length")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.label.data().iter().map(|&v| v as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = match self.label.shape() {
            &[d, h, w] => [d, h, w],
            other => {
                return Err(Error::shape(
                    "volume_sample",
                    format!("label must be [D,H,W], got {other:?}"),
                ))
            }
        };
        match self.image.shape() {
            &[_, d, h, w] if [d, h, w] == dims => {}
            other => {
                return Err(Error::shape(
                    "volume_sample",
                    format!("image {other:?} does not match label {dims:?}"),
                ))
            }
        }
        if let Some(i) = self.image.first_non_finite() {
            return Err(Error::NonFinite(format!("image voxel {i} of {}", self.id)));
        }
        let k = self.num_classes as f64;
        if let Some(i) = self
            .label
            .data()
            .iter()
            .position(|&v| !(v >= 0.0 && v < k && v.fract() == 0.0))
        {
            return Err(Error::config(format!(
                "label {} at voxel {i} of {} is not a class id below {}",
                self.label.data()[i],
                self.id,
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn default_channels() -> usize {
    1
}

/// Parameters of the synthetic dataset. Radii and margins are in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub extent: [usize; 3],
    pub num_classes: usize,
    pub num_samples: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Inclusive range of ellipsoids per sample.
    pub ellipsoids: [usize; 2],
    /// Range of the outer semi-axis lengths.
    pub radius: [f64; 2],
    /// Semi-axis shrink between successive nested classes.
    pub margin: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            extent: [32, 32, 32],
            num_classes: 4,
            num_samples: 20,
            channels: 1,
            ellipsoids: [1, 3],
            radius: [8.0, 12.0],
            margin: 2.5,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e == 0) {
            return Err(Error::config("extent must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        let [lo, hi] = self.ellipsoids;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("invalid ellipsoid count range {lo}..={hi}")));
        }
        let [rmin, rmax] = self.radius;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::config(format!("invalid radius range {rmin}..{rmax}")));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be finite and >= 0"));
        }
        let inner = rmin - self.margin * (self.num_classes - 2) as f64;
        if inner < 1.0 {
            return Err(Error::config(format!(
                "infeasible nesting: {} margins of {} exceed the minimum radius {rmin}",
                self.num_classes - 2,
                self.margin
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Noise-free intensity of class `k`.
    pub fn level(&self, k: usize) -> f64 {
        0.25 + 0.75 * k as f64 / (self.num_classes - 1) as f64
    }

    /// Minimum voxel count each class must reach in every sample.
    pub fn min_class_voxels(&self) -> usize {
        let vol: usize = self.extent.iter().product();
        vol.div_ceil(100)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Value `<= 1` inside the ellipsoid shrunk by `shrink` voxels per axis.
    fn inside(&self, p: [f64; 3], shrink: f64) -> bool {
        let mut q = 0.0;
        for a in 0..3 {
            let r = self.radii[a] - shrink;
            if r <= 0.0 {
                return false;
            }
            let t = (p[a] - self.center[a]) / r;
            q += t * t;
        }
        q <= 1.0
    }
}

fn draw_labels(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let [d, h, w] = spec.extent;
    let count = rng.gen_range(spec.ellipsoids[0]..=spec.ellipsoids[1]);
    let shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let radii: [f64; 3] =
                std::array::from_fn(|_| rng.gen_range(spec.radius[0]..=spec.radius[1]));
            let center = std::array::from_fn(|a| {
                let e = spec.extent[a] as f64;
                let lo = radii[a].min(e / 2.0);
                let hi = (e - 1.0 - radii[a]).max(lo);
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            });
            Ellipsoid { center, radii }
        })
        .collect();
    let mut labels = vec![0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut cls = 0;
                for e in &shapes {
                    for k in (cls + 1..spec.num_classes).rev() {
                        if e.inside(p, spec.margin * (k - 1) as f64) {
                            cls = k;
                            break;
                        }
                    }
                }
                labels[(z * h + y) * w + x] = cls;
            }
        }
    }
    labels
}

/// Generates sample `index` of the dataset; independent of the other samples.
pub fn gen_sample(spec: &SynthSpec, index: usize) -> Result<VolumeSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let need = spec.min_class_voxels();
    let labels = (0..MAX_ATTEMPTS)
        .map(|_| draw_labels(spec, &mut rng))
        .find(|labels| {
            let mut counts = vec![0; spec.num_classes];
            for &l in labels {
                counts[l] += 1;
            }
            counts.iter().all(|&c| c >= need)
        })
        .ok_or_else(|| {
            Error::config(format!(
                "sample {index}: no draw within {MAX_ATTEMPTS} attempts gives every class {need} voxels"
            ))
        })?;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
    let [d, h, w] = spec.extent;
    let vol = d * h * w;
    let mut image = Vec::with_capacity(spec.channels * vol);
    for _ in 0..spec.channels {
        for &l in &labels {
            let n = if spec.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            image.push(spec.level(l) + n);
        }
    }
    Ok(VolumeSample {
        image: Tensor::new(vec![spec.channels, d, h, w], image)?,
        label: Tensor::new(vec![d, h, w], labels.iter().map(|&l| l as f64).collect())?,
        id: format!("sample_{index:04}"),
        num_classes: spec.num_classes,
    })
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    (0..spec.num_samples).map(|i| gen_sample(spec, i)).collect()
}

/// Per-channel z-score over the nonzero voxels, clipped to `[-5, 5]`.
/// Channels without nonzero voxels or with zero variance become zeros.
pub fn normalize_clip<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    if let Some(i) = image.first_non_finite() {
        return Err(Error::NonFinite(format!("image voxel {i}")));
    }
    let c = image.shape()[0];
    let vol = image.len() / c;
    let lim = S::of(5.0);
    let mut out = image.data().to_vec();
    for ch in out.chunks_mut(vol) {
        let nz: Vec<S> = ch.iter().copied().filter(|&v| v != S::zero()).collect();
        let n = S::of_usize(nz.len().max(1));
        let mean = nz.iter().copied().sum::<S>() / n;
        let var = nz.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        if nz.is_empty() || !(var > S::zero()) {
            ch.fill(S::zero());
            continue;
        }
        let inv = S::one() / var.sqrt();
        for v in ch.iter_mut() {
            *v = ((*v - mean) * inv).max(-lim).min(lim);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeManifest {
    dims: [usize; 3],
    channels: usize,
    num_classes: usize,
    dtype: String,
    id: String,
    payload_bytes: usize,
}

/// Serializes a sample to MORV1 bytes.
pub fn encode_volume(sample: &VolumeSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let payload_bytes = 8 * (sample.image.len() + sample.label.len());
    let manifest = VolumeManifest {
        dims: sample.dims(),
        channels: sample.channels(),
        num_classes: sample.num_classes,
        dtype: "f64".into(),
        id: sample.id.clone(),
        payload_bytes,
    };
    let mut bytes = VOLUME_MAGIC.to_vec();
    bytes.extend(serde_json::to_vec(&manifest)?);
    bytes.push(b'\n');
    bytes.reserve(payload_bytes);
    for v in sample.image.data().iter().chain(sample.label.data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

/// Splits a header of `magic` + JSON line from its payload.
pub(crate) fn split_header<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    path: &Path,
) -> Result<(&'a [u8], &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(
            path,
            format!("bad magic, expected \"{}\"", String::from_utf8_lossy(magic)),
        ));
    }
    let rest = &bytes[magic.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "manifest line is not terminated"))?;
    Ok((&rest[..nl], &rest[nl + 1..]))
}

pub(crate) fn read_f64s(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Parses MORV1 bytes; `path` only labels errors.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<VolumeSample> {
    let (head, payload) = split_header(bytes, VOLUME_MAGIC, path)?;
    let m: VolumeManifest = serde_json::from_slice(head)
        .map_err(|e| Error::format(path, format!("invalid manifest: {e}")))?;
    if m.dtype != "f64" {
        return Err(Error::format(path, format!("unsupported dtype {:?}", m.dtype)));
    }
    if payload.len() != m.payload_bytes {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: m.payload_bytes,
            found: payload.len(),
        });
    }
    let vol: usize = m.dims.iter().product();
    if vol == 0 || m.channels == 0 {
        return Err(Error::format(path, "dims and channels must be positive"));
    }
    let expected = 8 * vol * (m.channels + 1);
    if m.payload_bytes != expected {
        return Err(Error::format(
            path,
            format!(
                "manifest payload_bytes {} inconsistent with dims {:?} x {} channels ({expected})",
                m.payload_bytes, m.dims, m.channels
            ),
        ));
    }
    let values = read_f64s(payload);
    let (img, lab) = values.split_at(m.channels * vol);
    let [d, h, w] = m.dims;
    let sample = VolumeSample {
        image: Tensor::new(vec![m.channels, d, h, w], img.to_vec())?,
        label: Tensor::new(vec![d, h, w], lab.to_vec())?,
        id: m.id,
        num_classes: m.num_classes,
    };
    sample
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(sample)
}

pub fn save_volume(path: impl AsRef<Path>, sample: &VolumeSample) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(sample)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeSample> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}
