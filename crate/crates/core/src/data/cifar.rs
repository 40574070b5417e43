//! Reader for the CIFAR-10 binary distribution.
//!
//! Every record is 3073 bytes: one label byte followed by 32×32 red, green
//! and blue planes.

use std::fs;
use std::path::Path;

use super::{Dataset, Meta};
use crate::{Error, Result, Tensor};

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = PIXELS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    /// `data_batch_1.bin` .. `data_batch_5.bin`
    Train,
    /// `test_batch.bin`
    Test,
}

impl CifarSplit {
    pub fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".into()],
        }
    }
}

fn class_names() -> Vec<String> {
    CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn parse(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD) {
        let offset = bytes.len() / RECORD * RECORD;
        return Err(Error::format(
            path,
            format!(
                "truncated record at byte offset {offset}: {} trailing bytes, records are {RECORD} bytes",
                bytes.len() - offset
            ),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(
                path,
                format!("label {label} > 9 in record {i} at byte offset {}", i * RECORD),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn assemble(pixels: Vec<f64>, labels: Vec<usize>, source: String) -> Result<Dataset> {
    let mut images = Tensor::new(vec![labels.len(), 3, SIDE, SIDE], pixels)?;
    super::quantize(&mut images);
    Dataset::new(
        images,
        labels,
        class_names(),
        Meta {
            source,
            ..Meta::default()
        },
    )
}

/// Reads one batch file. An empty file gives an empty dataset.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        log::warn!("{}: empty CIFAR-10 file, no records read", path.display());
    }
    let (pixels, labels) = parse(&bytes, path)?;
    assemble(pixels, labels, format!("cifar10:{}", path.display()))
}

/// Reads and concatenates the batch files of `split` found in `dir`.
pub fn load_cifar10_dir(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in split.files() {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    assemble(
        pixels,
        labels,
        format!("cifar10:{}:{split:?}", dir.display()).to_lowercase(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn reads_records_channel_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let mut bytes = record(3, 0);
        bytes.extend(record(9, 255));
        bytes[1 + SIDE * SIDE] = 51; // first green pixel of record 0
        fs::write(&path, &bytes).unwrap();
        let d = load_cifar10_binary(&path).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[3, 9]);
        assert_eq!(d.images().data()[SIDE * SIDE], (0.2f32) as f64);
        assert!(d.images().outer(1).iter().all(|&v| v == 1.0));
        assert_eq!(d.class_names()[3], "cat");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        fs::write(&path, b"").unwrap();
        let d = load_cifar10_binary(&path).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.image_shape(), [3, 32, 32]);
    }

    #[test]
    fn corrupt_length_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut bytes = record(1, 7);
        bytes.extend([0u8; 10]);
        fs::write(&path, &bytes).unwrap();
        let err = load_cifar10_binary(&path).unwrap_err().to_string();
        assert!(err.contains("offset 3073"), "{err}");
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.bin");
        fs::write(&path, record(10, 0)).unwrap();
        assert!(load_cifar10_binary(&path).is_err());
    }
}
