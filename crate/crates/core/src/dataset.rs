//! CIFAR-10/100 binary batches, raw tensor probe directories and probe-set
//! sampling.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor3};
use crate::{Error, Result};

pub const CIFAR_SHAPE: Shape = Shape::new(3, 32, 32);
const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarFormat {
    Cifar10,
    /// Coarse + fine label bytes; the fine label is kept.
    Cifar100,
}

impl CifarFormat {
    pub fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1 + PIXELS,
            CifarFormat::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }
}

impl std::str::FromStr for CifarFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cifar10" => Ok(CifarFormat::Cifar10),
            "cifar100" => Ok(CifarFormat::Cifar100),
            other => Err(format!("unknown dataset format '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Channels-first pixels scaled into `[0, 1]`.
    pub pixels: Tensor3,
    pub label: usize,
}

/// Decodes a CIFAR binary batch. Pixel bytes are scaled by `1/255`.
pub fn parse_cifar_batch(bytes: &[u8], format: CifarFormat) -> Result<Vec<LabeledImage>> {
    let rec = format.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Dataset(format!(
            "truncated record: {} bytes is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, r)| {
            let (label, pixels) = match format {
                CifarFormat::Cifar10 => (r[0], &r[1..]),
                CifarFormat::Cifar100 => (r[1], &r[2..]),
            };
            let label = label as usize;
            if label >= format.classes() {
                return Err(Error::Dataset(format!(
                    "record {i}: label {label} out of range for {} classes",
                    format.classes()
                )));
            }
            let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                pixels: Tensor3::new(3, 32, 32, data),
                label,
            })
        })
        .collect()
}

/// Encodes images back into the CIFAR record layout (pixels rounded to the
/// nearest byte). Mainly for fixtures.
pub fn encode_cifar_batch(images: &[LabeledImage], format: CifarFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(images.len() * format.record_len());
    for img in images {
        if format == CifarFormat::Cifar100 {
            out.push(0);
        }
        out.push(img.label as u8);
        out.extend(
            img.pixels
                .data
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    out
}

pub fn load_cifar_file(path: impl AsRef<Path>, format: CifarFormat) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_batch(&bytes, format)
}

/// Loads every `*.bin` file in `dir` (sorted by name) as one raw
/// little-endian `f32` tensor of the given shape.
pub fn load_raw_tensor_dir(dir: impl AsRef<Path>, shape: Shape) -> Result<Vec<Tensor3>> {
    let dir = dir.as_ref();
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .bin tensors in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            if bytes.len() != shape.numel() * 4 {
                return Err(Error::Dataset(format!(
                    "{}: {} bytes, expected {} for shape {shape}",
                    p.display(),
                    bytes.len(),
                    shape.numel() * 4
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Tensor3::new(shape.channels, shape.height, shape.width, data))
        })
        .collect()
}

/// The images over which similarity and auxiliary statistics are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub images: Vec<Tensor3>,
    /// Positions of the sampled images in the source dataset.
    pub indices: Vec<usize>,
    pub seed: u64,
    pub source: String,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Uses every tensor in order.
    pub fn from_tensors(images: Vec<Tensor3>, source: impl Into<String>) -> Self {
        let indices = (0..images.len()).collect();
        Self {
            images,
            indices,
            seed: 0,
            source: source.into(),
        }
    }

    pub fn concat(&self, other: &ProbeSet) -> ProbeSet {
        let mut images = self.images.clone();
        images.extend(other.images.iter().cloned());
        let mut indices = self.indices.clone();
        indices.extend(other.indices.iter().copied());
        ProbeSet {
            images,
            indices,
            seed: self.seed,
            source: format!("{}+{}", self.source, other.source),
        }
    }
}

/// Samples `m` distinct images, kept in dataset order. `m` equal to the
/// dataset size returns the whole set.
pub fn sample_probe_set(
    dataset: &[Tensor3],
    m: usize,
    seed: u64,
    source: impl Into<String>,
) -> Result<ProbeSet> {
    if m == 0 || m > dataset.len() {
        return Err(Error::Dataset(format!(
            "probe size {m} out of range 1..={}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, dataset.len(), m).into_vec();
    indices.sort_unstable();
    Ok(ProbeSet {
        images: indices.iter().map(|&i| dataset[i].clone()).collect(),
        indices,
        seed,
        source: source.into(),
    })
}

pub fn sample_labeled(
    dataset: &[LabeledImage],
    m: usize,
    seed: u64,
    source: impl Into<String>,
) -> Result<ProbeSet> {
    let pixels: Vec<Tensor3> = dataset.iter().map(|d| d.pixels.clone()).collect();
    sample_probe_set(&pixels, m, seed, source)
}
