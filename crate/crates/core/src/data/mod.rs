//! Datasets, their binary format, and model checkpoints.

pub mod checkpoint;
pub mod cifar;
pub mod synthetic;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::perturb::PerturbSpec;
use crate::{Error, Result, Tensor};

pub use checkpoint::{load_checkpoint, load_into, read_tensors, save_checkpoint, write_tensors};
pub use cifar::{load_cifar10_binary, load_cifar10_dir, CifarSplit, CIFAR10_CLASSES};
pub use synthetic::{generate_synthetic, SyntheticSpec};

const DATASET_MAGIC: &[u8; 4] = b"EADS";
const DATASET_VERSION: u32 = 1;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Where a dataset came from and what was done to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbSpec>,
    /// When set, [`Dataset::batch`] standardizes channels with these
    /// statistics; stored pixels stay in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<ChannelStats>,
}

/// Labelled images `[N, C, H, W]` with pixels in `[0, 1]`.
///
/// Pixels are kept exactly representable in `f32` so saving and loading is
/// lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
    pub meta: Meta,
}

/// Rounds every value to the nearest `f32`.
pub(crate) fn quantize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    class_names: Vec<String>,
    meta: Meta,
}

/// Manifest written next to a dataset file: `<file>.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        meta: Meta,
    ) -> Result<Self> {
        let (n, _, _, _) = images.dims4("dataset")?;
        if labels.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        let classes = class_names.len();
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label {
                index,
                label,
                classes,
            });
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            meta,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Image `i` as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.image_shape();
        Tensor::new(s.to_vec(), self.images.outer(i).to_vec()).expect("slab matches shape")
    }

    /// Replaces every image through `f(index, image)`; output keeps the shape.
    pub fn map_images(&self, mut f: impl FnMut(usize, &Tensor) -> Result<Tensor>) -> Result<Dataset> {
        let mut images = self.images.clone();
        for i in 0..self.len() {
            let out = f(i, &self.image(i))?;
            if out.shape() != self.image_shape() {
                return Err(Error::shape(
                    "map_images",
                    format!("image {i} became {:?}", out.shape()),
                ));
            }
            images.outer_mut(i).copy_from_slice(out.data());
        }
        quantize(&mut images);
        Dataset::new(images, self.labels.clone(), self.class_names.clone(), self.meta.clone())
    }

    /// Images and labels at `indices`, standardized when the meta asks for it.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut x = self.images.select_outer(indices);
        if let Some(stats) = &self.meta.standardization {
            let [c, h, w] = self.image_shape();
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                let ch = (i / (h * w)) % c;
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_outer(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Per-channel statistics over the whole set.
    pub fn channel_stats(&self) -> Result<ChannelStats> {
        if self.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let [c, h, w] = self.image_shape();
        let area = h * w;
        let count = (self.len() * area) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &v) in self.images.data().iter().enumerate() {
            let ch = (i / area) % c;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    /// Writes the binary dataset file and its manifest (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.image_shape();
        let n = self.len();
        let dims = [n, c, h, w]
            .iter()
            .map(|&d| u32::try_from(d))
            .collect::<std::result::Result<Vec<u32>, _>>()
            .map_err(|_| Error::Config("dataset extent exceeds u32".into()))?;
        if self.num_classes() > usize::from(u16::MAX) + 1 {
            return Err(Error::Config("more classes than u16 labels allow".into()));
        }
        let mut buf = Vec::with_capacity(24 + self.images.len() * 4 + n * 2);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in self.images.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u16).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let manifest = Manifest {
            format: "EADS".into(),
            version: DATASET_VERSION,
            count: n,
            channels: c,
            height: h,
            width: w,
            class_names: self.class_names.clone(),
            meta: self.meta.clone(),
        };
        let mpath = manifest_path(path);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]. Without a manifest, class
    /// names default to the label numbers seen.
    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 24 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::format(path, "missing EADS magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let version = word(1);
        if version != DATASET_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let [n, c, h, w] = [word(2), word(3), word(4), word(5)].map(|v| v as usize);
        let pixels = n * c * h * w;
        let expected = 24 + pixels * 4 + n * 2;
        if bytes.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for {n}x{c}x{h}x{w}, found {}", bytes.len()),
            ));
        }
        let data: Vec<f64> = bytes[24..24 + pixels * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let labels: Vec<usize> = bytes[24 + pixels * 4..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        let images = Tensor::new(vec![n, c, h, w], data)?;
        let mpath = manifest_path(path);
        let (class_names, meta) = match fs::read_to_string(&mpath) {
            Ok(text) => {
                let m: Manifest = serde_json::from_str(&text)?;
                if [m.count, m.channels, m.height, m.width] != [n, c, h, w] {
                    return Err(Error::format(&mpath, "manifest extents disagree with data"));
                }
                (m.class_names, m.meta)
            }
            Err(_) => {
                log::warn!("{}: no manifest, naming classes by label", path.display());
                let k = labels.iter().max().map_or(0, |m| m + 1);
                let names = (0..k).map(|i| i.to_string()).collect();
                (
                    names,
                    Meta {
                        source: path.display().to_string(),
                        ..Meta::default()
                    },
                )
            }
        };
        Dataset::new(images, labels, class_names, meta)
    }
}
