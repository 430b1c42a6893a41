//! Deterministic synthetic datasets and the training-time augmentations.
//!
//! Every sample is a pure function of (spec, seed, sample index) through
//! the counter-based generator in [`crate::rng`], so regeneration is
//! byte-identical anywhere. Class 0 is pure Gaussian noise; class 1 adds
//! a bright axis-aligned square (2D), cuboid (3D), or a planted signal
//! direction in a few tokens (token bags, the whole-slide stand-in).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// Noise image vs noise + bright square of side `square`.
    BrightSquare2d { height: usize, width: usize, square: usize },
    /// Noise volume vs noise + bright cuboid of edge `blob` (clamped to
    /// each axis).
    BrightBlob3d { depth: usize, height: usize, width: usize, blob: usize },
    /// Variable-length token sequences; class 1 plants an amplitude-scaled
    /// unit direction in `signal_tokens` random tokens.
    TokenBag { dim: usize, min_tokens: usize, max_tokens: usize, signal_tokens: usize },
}

fn default_balance() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub num_samples: usize,
    /// Probability of class 1.
    #[serde(default = "default_balance")]
    pub class_balance: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Strict JSON parsing: serde's `deny_unknown_fields` cannot be combined
/// with the flattened kind, so key checking is done by hand here.
pub fn spec_from_value(value: &serde_json::Value) -> Result<SyntheticDatasetSpec> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("dataset spec must be a JSON object".into()))?;
    let kind = obj
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Config("dataset spec needs a string `kind` field".into()))?;
    let common = ["kind", "num_samples", "class_balance", "amplitude", "noise_std", "seed"];
    let specific: &[&str] = match kind {
        "bright_square2d" => &["height", "width", "square"],
        "bright_blob3d" => &["depth", "height", "width", "blob"],
        "token_bag" => &["dim", "min_tokens", "max_tokens", "signal_tokens"],
        other => return Err(Error::Config(format!("unknown dataset kind {other:?}"))),
    };
    for key in obj.keys() {
        if !common.contains(&key.as_str()) && !specific.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown dataset spec field {key:?}")));
        }
    }
    let spec: SyntheticDatasetSpec = serde_json::from_value(value.clone())?;
    spec.validate()?;
    Ok(spec)
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.amplitude < 0.0 {
            return Err(Error::Config("amplitude must be non-negative".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::Config("class_balance must lie in [0, 1]".into()));
        }
        match &self.kind {
            SynthKind::BrightSquare2d { height, width, square } => {
                if *square == 0 || square > height.min(width) {
                    return Err(Error::Config(format!(
                        "square {square} must fit inside {height}x{width}"
                    )));
                }
            }
            SynthKind::BrightBlob3d { depth, height, width, blob } => {
                if *blob == 0 || *depth == 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config("blob and volume dims must be positive".into()));
                }
            }
            SynthKind::TokenBag { dim, min_tokens, max_tokens, signal_tokens } => {
                if *dim == 0 || *min_tokens == 0 || min_tokens > max_tokens {
                    return Err(Error::Config("token bag needs 0 < min_tokens <= max_tokens".into()));
                }
                if signal_tokens > min_tokens {
                    return Err(Error::Config(
                        "signal_tokens cannot exceed min_tokens".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sample shape for fixed-size kinds ([C, ...spatial]); token bags
    /// vary per sample.
    pub fn sample_shape(&self) -> Option<Vec<usize>> {
        match &self.kind {
            SynthKind::BrightSquare2d { height, width, .. } => Some(vec![1, *height, *width]),
            SynthKind::BrightBlob3d { depth, height, width, .. } => {
                Some(vec![1, *depth, *height, *width])
            }
            SynthKind::TokenBag { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Vec<f32>,
    /// [C, H, W] / [C, D, H, W] for images, [tokens, dim] for bags.
    pub shape: Vec<usize>,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticDatasetSpec,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// FNV-1a over labels and little-endian sample bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for s in &self.samples {
            bytes.push(s.label);
            for &v in &s.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

/// Unit-norm signal direction shared by all class-1 token bags of a
/// dataset.
fn signal_direction(spec: &SyntheticDatasetSpec, dim: usize) -> Vec<f64> {
    let mut s = Stream::new(spec.seed).named("signal-direction");
    let mut u: Vec<f64> = (0..dim).map(|_| s.gaussian()).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for v in u.iter_mut() {
        *v /= norm;
    }
    u
}

fn generate_one(spec: &SyntheticDatasetSpec, index: usize, signal: &Option<Vec<f64>>) -> Sample {
    let mut s = Stream::new(spec.seed).child(index as u64);
    let label = u8::from(s.coin(spec.class_balance));
    match &spec.kind {
        SynthKind::BrightSquare2d { height, width, square } => {
            let (h, w, sq) = (*height, *width, *square);
            let pos = if label == 1 {
                Some((s.below(h - sq + 1), s.below(w - sq + 1)))
            } else {
                None
            };
            let mut data: Vec<f32> =
                (0..h * w).map(|_| (s.gaussian() * spec.noise_std) as f32).collect();
            if let Some((y0, x0)) = pos {
                for y in y0..y0 + sq {
                    for x in x0..x0 + sq {
                        data[y * w + x] += spec.amplitude as f32;
                    }
                }
            }
            Sample { data, shape: vec![1, h, w], label }
        }
        SynthKind::BrightBlob3d { depth, height, width, blob } => {
            let (d, h, w) = (*depth, *height, *width);
            let (bd, bh, bw) = ((*blob).min(d), (*blob).min(h), (*blob).min(w));
            let pos = if label == 1 {
                Some((s.below(d - bd + 1), s.below(h - bh + 1), s.below(w - bw + 1)))
            } else {
                None
            };
            let mut data: Vec<f32> =
                (0..d * h * w).map(|_| (s.gaussian() * spec.noise_std) as f32).collect();
            if let Some((z0, y0, x0)) = pos {
                for z in z0..z0 + bd {
                    for y in y0..y0 + bh {
                        for x in x0..x0 + bw {
                            data[(z * h + y) * w + x] += spec.amplitude as f32;
                        }
                    }
                }
            }
            Sample { data, shape: vec![1, d, h, w], label }
        }
        SynthKind::TokenBag { dim, min_tokens, max_tokens, signal_tokens } => {
            let len = min_tokens + s.below(max_tokens - min_tokens + 1);
            let chosen: Vec<usize> = if label == 1 {
                let mut picked = Vec::with_capacity(*signal_tokens);
                while picked.len() < *signal_tokens {
                    let c = s.below(len);
                    if !picked.contains(&c) {
                        picked.push(c);
                    }
                }
                picked
            } else {
                Vec::new()
            };
            let mut data: Vec<f32> =
                (0..len * dim).map(|_| (s.gaussian() * spec.noise_std) as f32).collect();
            if label == 1 {
                let u = signal.as_ref().expect("token bags carry a signal direction");
                for &t in &chosen {
                    for f in 0..*dim {
                        data[t * dim + f] += (spec.amplitude * u[f]) as f32;
                    }
                }
            }
            Sample { data, shape: vec![len, *dim], label }
        }
    }
}

/// Generates the full dataset described by `spec`.
pub fn generate(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let signal = match &spec.kind {
        SynthKind::TokenBag { dim, .. } => Some(signal_direction(spec, *dim)),
        _ => None,
    };
    let samples = (0..spec.num_samples).map(|i| generate_one(spec, i, &signal)).collect();
    Ok(SyntheticDataset { spec: spec.clone(), samples })
}

// ── Augmentations ────────────────────────────────────────────────────

/// Rotates [C, H, W] around the image center by `angle_deg`, bilinear
/// interpolation, zero fill outside. Angle 0 is an exact identity.
pub fn rotate2d_bilinear(data: &[f32], c: usize, h: usize, w: usize, angle_deg: f64) -> Vec<f32> {
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; data.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: rotate the destination back into the source
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let plane = &data[ch * h * w..(ch + 1) * h * w];
                let at = |yy: isize, xx: isize| -> f64 {
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize] as f64
                    }
                };
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

/// Reverses one axis of an arbitrary-rank array.
pub fn flip_axis(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for l in 0..len {
            let src = (o * len + l) * inner;
            let dst = (o * len + (len - 1 - l)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

/// Training augmentation. 2D: rotation by an angle uniform in [-45°, +45°]
/// then vertical flip with p = 0.5. 3D: independent p = 0.5 flip per
/// spatial axis. Token bags pass through unchanged. Labels never change.
pub fn augment(sample: &Sample, stream: &mut Stream) -> Sample {
    match sample.shape.len() {
        3 => {
            let (c, h, w) = (sample.shape[0], sample.shape[1], sample.shape[2]);
            let angle = stream.uniform_in(-45.0, 45.0);
            let mut data = rotate2d_bilinear(&sample.data, c, h, w, angle);
            if stream.coin(0.5) {
                data = flip_axis(&data, &sample.shape, 1);
            }
            Sample { data, shape: sample.shape.clone(), label: sample.label }
        }
        4 => {
            let mut data = sample.data.clone();
            for axis in 1..4 {
                if stream.coin(0.5) {
                    data = flip_axis(&data, &sample.shape, axis);
                }
            }
            Sample { data, shape: sample.shape.clone(), label: sample.label }
        }
        _ => sample.clone(),
    }
}

// ── Export / import ──────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticDatasetSpec,
    seed: u64,
    shapes: Vec<Vec<usize>>,
    labels: Vec<u8>,
}

/// Writes `<name>.bin` (concatenated little-endian f32 samples) and
/// `<name>.json` (spec, seed, per-sample dims, labels).
pub fn export_dataset(ds: &SyntheticDataset, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let bin_path = dir.join(format!("{name}.bin"));
    let json_path = dir.join(format!("{name}.json"));
    let mut blob = Vec::new();
    for s in &ds.samples {
        for &v in &s.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&bin_path, blob)?;
    let sidecar = Sidecar {
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
        shapes: ds.samples.iter().map(|s| s.shape.clone()).collect(),
        labels: ds.samples.iter().map(|s| s.label).collect(),
    };
    std::fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok((bin_path, json_path))
}

pub fn import_dataset(bin_path: &Path, json_path: &Path) -> Result<SyntheticDataset> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(json_path)?)?;
    let blob = std::fs::read(bin_path)?;
    let total: usize = sidecar.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "dataset blob is {} bytes, sidecar expects {}",
            blob.len(),
            total * 4
        )));
    }
    let mut samples = Vec::with_capacity(sidecar.shapes.len());
    let mut off = 0;
    for (shape, label) in sidecar.shapes.iter().zip(&sidecar.labels) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = blob[off..off + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        off += n * 4;
        samples.push(Sample { data, shape: shape.clone(), label: *label });
    }
    Ok(SyntheticDataset { spec: sidecar.spec, samples })
}
