//! Dataset loading, open-set splits, and input geometry.
//!
//! Fashion-MNIST is read from the standard IDX files, CIFAR-10 from its
//! binary batch files. CIFAR-10 images are converted to grayscale with
//! luminance weights 0.299/0.587/0.114. An open-set split picks six class
//! ids as known (train + test) and leaves the rest as the unknown class,
//! which appears only in the test set.

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Grayscale intensities in [0, 1], row-major, raw (unpadded) dims.
    pub pixels: Array2<f32>,
    pub label: usize,
    pub sample_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub raw_dims: (usize, usize),
    pub padded_dims: (usize, usize),
    pub class_count: usize,
}

impl DatasetSpec {
    pub fn fashion_mnist() -> Self {
        DatasetSpec {
            name: "fashion-mnist".into(),
            raw_dims: (28, 28),
            padded_dims: (32, 32),
            class_count: 10,
        }
    }

    pub fn cifar10() -> Self {
        DatasetSpec {
            name: "cifar10".into(),
            raw_dims: (32, 32),
            padded_dims: (36, 36),
            class_count: 10,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "fashion-mnist" => Ok(Self::fashion_mnist()),
            "cifar10" => Ok(Self::cifar10()),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// A test-set sample carries its open-set ground truth.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub image: LabeledImage,
    pub is_unknown: bool,
}

#[derive(Debug, Clone)]
pub struct OpenSetSplit {
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
    pub split_seed: u64,
    pub train_set: Vec<LabeledImage>,
    pub test_set: Vec<TestSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub split_seed: u64,
    pub known_class_ids: Vec<usize>,
    pub unknown_class_ids: Vec<usize>,
}

impl OpenSetSplit {
    pub fn manifest(&self, dataset: &str) -> SplitManifest {
        SplitManifest {
            dataset: dataset.to_string(),
            split_seed: self.split_seed,
            known_class_ids: self.known_class_ids.clone(),
            unknown_class_ids: self.unknown_class_ids.clone(),
        }
    }

    /// Maps a dataset label to its dense index in [0, K) over known classes.
    pub fn known_index(&self, label: usize) -> Option<usize> {
        self.known_class_ids.iter().position(|&c| c == label)
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::DataLoad {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_idx_images(path: &Path) -> Result<Vec<Array2<f32>>> {
    let mut f = File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let magic = f
        .read_u32::<BigEndian>()
        .map_err(|e| load_err(path, e.to_string()))?;
    if magic != 2051 {
        return Err(load_err(path, format!("bad IDX image magic {magic}")));
    }
    let n = f.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let h = f.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let w = f.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let mut buf = vec![0u8; n * h * w];
    f.read_exact(&mut buf)
        .map_err(|_| load_err(path, "truncated IDX image data"))?;
    Ok(buf
        .chunks_exact(h * w)
        .map(|c| {
            Array2::from_shape_vec((h, w), c.iter().map(|&b| b as f32 / 255.0).collect()).unwrap()
        })
        .collect())
}

fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let magic = f
        .read_u32::<BigEndian>()
        .map_err(|e| load_err(path, e.to_string()))?;
    if magic != 2049 {
        return Err(load_err(path, format!("bad IDX label magic {magic}")));
    }
    let n = f.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let mut buf = vec![0u8; n];
    f.read_exact(&mut buf)
        .map_err(|_| load_err(path, "truncated IDX label data"))?;
    Ok(buf.into_iter().map(|b| b as usize).collect())
}

fn idx_pairs(
    images: &Path,
    labels: &Path,
    id_base: u32,
) -> Result<Vec<LabeledImage>> {
    let imgs = read_idx_images(images)?;
    let lbls = read_idx_labels(labels)?;
    if imgs.len() != lbls.len() {
        return Err(load_err(images, "image/label count mismatch"));
    }
    Ok(imgs
        .into_iter()
        .zip(lbls)
        .enumerate()
        .map(|(i, (pixels, label))| LabeledImage {
            pixels,
            label,
            sample_id: id_base + i as u32,
        })
        .collect())
}

fn read_cifar_batch(path: &Path, id_base: u32) -> Result<Vec<LabeledImage>> {
    let mut f = File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| load_err(path, e.to_string()))?;
    const REC: usize = 1 + 3072;
    if buf.is_empty() || buf.len() % REC != 0 {
        return Err(load_err(path, "corrupt CIFAR-10 batch (bad record size)"));
    }
    let mut out = Vec::with_capacity(buf.len() / REC);
    for (i, rec) in buf.chunks_exact(REC).enumerate() {
        let label = rec[0] as usize;
        let (r, rest) = rec[1..].split_at(1024);
        let (g, b) = rest.split_at(1024);
        let mut pixels = Array2::<f32>::zeros((32, 32));
        for p in 0..1024 {
            let gray =
                0.299 * r[p] as f32 + 0.587 * g[p] as f32 + 0.114 * b[p] as f32;
            pixels[[p / 32, p % 32]] = gray / 255.0;
        }
        out.push(LabeledImage {
            pixels,
            label,
            sample_id: id_base + i as u32,
        });
    }
    Ok(out)
}

/// Loads the full train + test sets for `spec` from `root`.
pub fn load_dataset(spec: &DatasetSpec, root: &Path) -> Result<Dataset> {
    match spec.name.as_str() {
        "fashion-mnist" => {
            let train = idx_pairs(
                &root.join("train-images-idx3-ubyte"),
                &root.join("train-labels-idx1-ubyte"),
                0,
            )?;
            let test = idx_pairs(
                &root.join("t10k-images-idx3-ubyte"),
                &root.join("t10k-labels-idx1-ubyte"),
                1_000_000,
            )?;
            Ok(Dataset {
                spec: spec.clone(),
                train,
                test,
            })
        }
        "cifar10" => {
            let mut train = Vec::new();
            for i in 1..=5 {
                let path = root.join(format!("data_batch_{i}.bin"));
                train.extend(read_cifar_batch(&path, (i as u32 - 1) * 10_000)?);
            }
            let test = read_cifar_batch(&root.join("test_batch.bin"), 1_000_000)?;
            Ok(Dataset {
                spec: spec.clone(),
                train,
                test,
            })
        }
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

/// Seeded open-set partition: 6 known classes, the rest unknown.
pub fn make_open_set_split(dataset: &Dataset, split_seed: u64) -> Result<OpenSetSplit> {
    let c = dataset.spec.class_count;
    if c < 7 {
        return Err(Error::TooFewClasses(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut ids: Vec<usize> = (0..c).collect();
    ids.shuffle(&mut rng);
    let mut known: Vec<usize> = ids[..6].to_vec();
    let mut unknown: Vec<usize> = ids[6..].to_vec();
    known.sort_unstable();
    unknown.sort_unstable();

    let train_set: Vec<LabeledImage> = dataset
        .train
        .iter()
        .filter(|s| known.contains(&s.label))
        .cloned()
        .collect();
    let test_set: Vec<TestSample> = dataset
        .test
        .iter()
        .map(|s| TestSample {
            is_unknown: !known.contains(&s.label),
            image: s.clone(),
        })
        .collect();

    Ok(OpenSetSplit {
        known_class_ids: known,
        unknown_class_ids: unknown,
        split_seed,
        train_set,
        test_set,
    })
}

/// Zero-pads `image` so the original content sits centered in the padded grid.
pub fn pad_and_normalize(image: &LabeledImage, spec: &DatasetSpec) -> Result<Array2<f32>> {
    let (rh, rw) = image.pixels.dim();
    if (rh, rw) != spec.raw_dims {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", spec.raw_dims),
            actual: format!("{:?}", (rh, rw)),
        });
    }
    let (ph, pw) = spec.padded_dims;
    let (oy, ox) = ((ph - rh) / 2, (pw - rw) / 2);
    let mut out = Array2::<f32>::zeros((ph, pw));
    out.slice_mut(ndarray::s![oy..oy + rh, ox..ox + rw])
        .assign(&image.pixels);
    Ok(out)
}

/// Inverse of [`pad_and_normalize`]: crops the centered original back out.
pub fn crop_padding(padded: &Array2<f32>, spec: &DatasetSpec) -> Array2<f32> {
    let (rh, rw) = spec.raw_dims;
    let (ph, pw) = spec.padded_dims;
    let (oy, ox) = ((ph - rh) / 2, (pw - rw) / 2);
    padded
        .slice(ndarray::s![oy..oy + rh, ox..ox + rw])
        .to_owned()
}
