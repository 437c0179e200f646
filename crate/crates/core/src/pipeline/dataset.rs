//! IDX (MNIST-style) and CIFAR-10 binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::runtime::Tensor;
use crate::taxonomy::CategoryId;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0} is truncated")]
    TruncatedFile(PathBuf),
    #[error("record {record} has label {label}, outside 0..10")]
    LabelOutOfRange { record: usize, label: u8 },
    #[error("no dataset files found in {0}")]
    NoFiles(PathBuf),
}

/// Per-channel standardization applied after scaling bytes to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Normalization {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Normalization {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub normalization: Normalization,
    pub name: String,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| DataError::TruncatedFile(path.to_path_buf()))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn standardize(bytes: &[u8], dims: Vec<usize>, norm: &Normalization) -> Tensor<f32> {
    let plane: usize = dims[2..].iter().product();
    let c = dims[1];
    let data = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let ch = i / plane % c;
            (b as f32 / 255.0 - norm.mean[ch]) / norm.std[ch]
        })
        .collect();
    Tensor::new(dims, data).expect("dims match byte count")
}

/// Reads an IDX image file (magic 0x803) and its label file (magic 0x801).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES,
            found: magic,
        });
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let h = be_u32(&img, 8, images_path)? as usize;
    let w = be_u32(&img, 12, images_path)? as usize;
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if n != nl {
        return Err(DataError::CountMismatch { images: n, labels: nl });
    }
    let pixels = img
        .get(16..16 + n * h * w)
        .ok_or_else(|| DataError::TruncatedFile(images_path.to_path_buf()))?;
    let labels = lab
        .get(8..8 + n)
        .ok_or_else(|| DataError::TruncatedFile(labels_path.to_path_buf()))?;
    let norm = Normalization::mnist();
    Ok(Dataset {
        images: standardize(pixels, vec![n, 1, h, w], &norm),
        labels: labels.iter().map(|&l| l as usize).collect(),
        normalization: norm,
        name: "idx".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads the usual file pair of an IDX directory (`train-*` or `t10k-*`).
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset, DataError> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::TruncatedFile(path.to_path_buf()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (record, chunk) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if chunk[0] >= 10 {
            return Err(DataError::LabelOutOfRange {
                record,
                label: chunk[0],
            });
        }
        labels.push(chunk[0] as usize);
        pixels.extend_from_slice(&chunk[1..]);
    }
    let norm = Normalization::cifar10();
    Ok(Dataset {
        images: standardize(&pixels, vec![n, 3, 32, 32], &norm),
        labels,
        normalization: norm,
        name: "cifar10".into(),
    })
}

/// Loads a CIFAR-10 split from a directory (`data_batch_*.bin` or
/// `test_batch.bin`), or a single batch file.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset, DataError> {
    if path.is_file() {
        return load_cifar10_file(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            match split {
                Split::Train => name.starts_with("data_batch_") && name.ends_with(".bin"),
                Split::Test => name == "test_batch.bin",
            }
        })
        .collect();
    files.sort();
    let parts = files
        .iter()
        .map(|f| load_cifar10_file(f))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::concat(parts).ok_or_else(|| DataError::NoFiles(path.to_path_buf()))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            normalization: self.normalization.clone(),
            name: self.name.clone(),
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Samples whose label is one of `categories`, in original order.
    pub fn filter_classes(&self, categories: &[CategoryId]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| categories.iter().any(|c| c.0 == self.labels[i]))
            .collect();
        self.select(&idx)
    }

    fn concat(parts: Vec<Dataset>) -> Option<Dataset> {
        let first = parts.first()?;
        let dims = first.images.dims().to_vec();
        let normalization = first.normalization.clone();
        let name = first.name.clone();
        let n: usize = parts.iter().map(Dataset::len).sum();
        let mut data = Vec::with_capacity(n * dims[1..].iter().product::<usize>());
        let mut labels = Vec::with_capacity(n);
        for p in parts {
            labels.extend(p.labels);
            data.extend(p.images.into_data());
        }
        let mut all = dims;
        all[0] = n;
        Some(Dataset {
            images: Tensor::new(all, data).ok()?,
            labels,
            normalization,
            name,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_pair(dir: &Path, n_img: u32, n_lab: u32) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut img = Vec::new();
        img.extend(IDX_IMAGES.to_be_bytes());
        img.extend(n_img.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend((0..n_img * 4).map(|i| (i * 17 % 256) as u8));
        fs::write(&ip, img).unwrap();
        let mut lab = Vec::new();
        lab.extend(IDX_LABELS.to_be_bytes());
        lab.extend(n_lab.to_be_bytes());
        lab.extend((0..n_lab).map(|i| (i % 10) as u8));
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_values() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 3, 3);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images.dims(), &[3, 1, 2, 2]);
        assert_eq!(d.labels, [0, 1, 2]);
        // Byte 17 of the first image.
        let expected = (17.0 / 255.0 - 0.1307) / 0.3081;
        assert!((d.images.data()[1] - expected).abs() < 1e-6);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 100, 99);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch { images: 100, labels: 99 })
        ));
        // Swapped files: the label reader sees an image magic.
        assert!(matches!(
            load_idx(&ip, &ip),
            Err(DataError::BadMagic { found: IDX_IMAGES, .. })
        ));
        let (ip, lp) = idx_pair(dir.path(), 3, 3);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(DataError::TruncatedFile(_))));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut f = fs::File::create(&path).unwrap();
        for label in [3u8, 9] {
            f.write_all(&[label]).unwrap();
            f.write_all(&vec![128u8; 3072]).unwrap();
        }
        drop(f);
        let d = load_cifar10_binary(dir.path(), Split::Train).unwrap();
        assert_eq!(d.images.dims(), &[2, 3, 32, 32]);
        assert_eq!(d.labels, [3, 9]);
        let g = d.images.data()[1024];
        assert!((g - (128.0 / 255.0 - 0.4822) / 0.2435).abs() < 1e-6);

        fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10_file(&path), Err(DataError::TruncatedFile(_))));
        let mut bad = vec![10u8];
        bad.extend(vec![0u8; 3072]);
        fs::write(&path, bad).unwrap();
        assert!(matches!(
            load_cifar10_file(&path),
            Err(DataError::LabelOutOfRange { record: 0, label: 10 })
        ));
        assert!(matches!(
            load_cifar10_binary(dir.path(), Split::Test),
            Err(DataError::NoFiles(_))
        ));
    }

    #[test]
    fn filtering() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 25, 25);
        let d = load_idx(&ip, &lp).unwrap();
        let f = d.filter_classes(&[CategoryId(2), CategoryId(7)]);
        assert_eq!(f.labels, [2, 7, 2, 7, 2]);
        assert_eq!(f.images.dims()[0], 5);
        assert_eq!(d.take(4).len(), 4);
    }
}
