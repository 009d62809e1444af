//! MNIST ingestion: IDX parsing, 2×2 max-pooling, binarization, and the
//! seeded train/validation split.
//!
//! Pipeline per image: bytes / 255 → 2×2 max-pool (28×28 → 14×14) →
//! threshold `> 0.5` → row-major bit vector of length 196.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{DataError, Error, Result};
use crate::rng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

pub const RAW_SIDE: usize = 28;
pub const POOLED_SIDE: usize = 14;
pub const POOLED_PIXELS: usize = POOLED_SIDE * POOLED_SIDE;
pub const CLASSES: usize = 10;

pub const TRAIN_SIZE: usize = 50_000;
pub const VALIDATION_SIZE: usize = 10_000;
/// Size of the test prefix used for the device-verification runs.
pub const HARDWARE_SUBSET: usize = 600;

/// Canonical MNIST files and the SHA-256 of their uncompressed contents.
pub const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// Parsed IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an in-memory IDX file (raw, not gzipped).
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxTensor, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            found: magic,
            expected: expected_magic,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DataError::DimensionOverflow)?;
    let expected = header
        .checked_add(payload)
        .ok_or(DataError::DimensionOverflow)?;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Reads a file, transparently gunzipping it when it carries the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an IDX file from disk (gzip or raw).
pub fn load_idx(path: &Path, expected_magic: u32) -> Result<IdxTensor, DataError> {
    parse_idx(&read_maybe_gz(path)?, expected_magic)
}

/// Validates a labels tensor and returns its values.
pub fn labels_from_idx(tensor: &IdxTensor) -> Result<Vec<u8>, DataError> {
    if let Some((index, &label)) = tensor
        .data
        .iter()
        .enumerate()
        .find(|(_, &l)| usize::from(l) >= CLASSES)
    {
        return Err(DataError::BadLabel { index, label });
    }
    Ok(tensor.data.clone())
}

/// Non-overlapping 2×2 max-pool of a 28×28 image.
pub fn maxpool_2x2(image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != RAW_SIDE * RAW_SIDE {
        return Err(Error::InvalidArgument(format!(
            "max-pool expects a {RAW_SIDE}x{RAW_SIDE} image, got {} pixels",
            image.len()
        )));
    }
    let mut out = Vec::with_capacity(POOLED_PIXELS);
    for r in 0..POOLED_SIDE {
        for c in 0..POOLED_SIDE {
            let at = |dr: usize, dc: usize| image[(2 * r + dr) * RAW_SIDE + 2 * c + dc];
            out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
        }
    }
    Ok(out)
}

/// `1` where the intensity is strictly above one half.
pub fn binarize(image: &[f64]) -> Vec<u8> {
    image.iter().map(|&v| u8::from(v > 0.5)).collect()
}

/// Full per-image pipeline from raw 28×28 bytes.
pub fn preprocess(raw: &[u8]) -> Result<Vec<u8>> {
    let normalized: Vec<f64> = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(binarize(&maxpool_2x2(&normalized)?))
}

/// Seeded train/validation assignment of `total` training-file images:
/// a permutation whose first `train_size` entries form the training split.
pub fn split(seed: u64, total: usize, train_size: usize) -> (Vec<u32>, Vec<u32>) {
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.shuffle(&mut rng::stream(seed, "data/split"));
    let validation = order.split_off(train_size.min(total));
    (order, validation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
    /// First [`HARDWARE_SUBSET`] test images in file order.
    TestSubset,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            "test-subset" | "subset" => Ok(Self::TestSubset),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Binary images with labels and split index sets.
///
/// Indices in the splits refer to `images`; for MNIST the first 60,000
/// entries come from the training file and the rest from the test file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinarizedDataset {
    inputs: usize,
    classes: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
    train: Vec<u32>,
    validation: Vec<u32>,
    test: Vec<u32>,
    seed: u64,
    active_offsets: Vec<usize>,
    active: Vec<u32>,
}

impl BinarizedDataset {
    pub fn from_parts(
        inputs: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
        train: Vec<u32>,
        validation: Vec<u32>,
        test: Vec<u32>,
        seed: u64,
    ) -> Result<Self> {
        if inputs == 0 || images.len() != inputs * labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not form {} images of {inputs} inputs",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("pixels must be bits".into()));
        }
        let n = labels.len() as u32;
        if train.iter().chain(&validation).chain(&test).any(|&i| i >= n) {
            return Err(Error::InvalidArgument("split index out of range".into()));
        }
        let mut active_offsets = Vec::with_capacity(labels.len() + 1);
        let mut active = Vec::new();
        active_offsets.push(0);
        for image in images.chunks_exact(inputs) {
            active.extend(
                image
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(j, _)| j as u32),
            );
            active_offsets.push(active.len());
        }
        let classes = labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(1).max(2);
        Ok(Self {
            inputs,
            classes,
            images,
            labels,
            train,
            validation,
            test,
            seed,
            active_offsets,
            active,
        })
    }

    /// Builds the dataset from the four canonical MNIST files in `dir`
    /// (raw or `.gz`), verifying their checksums.
    pub fn load_mnist(dir: &Path, seed: u64) -> Result<Self> {
        let paths = locate_mnist(dir)?;
        let mut contents = Vec::with_capacity(4);
        for ((name, sha), path) in MNIST_FILES.iter().zip(&paths) {
            let bytes = read_maybe_gz(path)?;
            let actual = sha256_hex(&bytes);
            if actual != *sha {
                return Err(DataError::Checksum {
                    file: (*name).to_string(),
                    expected: (*sha).to_string(),
                    actual,
                }
                .into());
            }
            contents.push(bytes);
        }
        let train_images = parse_idx(&contents[0], IMAGE_MAGIC)?;
        let train_labels = labels_from_idx(&parse_idx(&contents[1], LABEL_MAGIC)?)?;
        let test_images = parse_idx(&contents[2], IMAGE_MAGIC)?;
        let test_labels = labels_from_idx(&parse_idx(&contents[3], LABEL_MAGIC)?)?;
        Self::from_idx(
            &train_images,
            &train_labels,
            &test_images,
            &test_labels,
            seed,
        )
    }

    /// Runs the preprocessing pipeline and split over parsed IDX tensors.
    pub fn from_idx(
        train_images: &IdxTensor,
        train_labels: &[u8],
        test_images: &IdxTensor,
        test_labels: &[u8],
        seed: u64,
    ) -> Result<Self> {
        for t in [train_images, test_images] {
            if t.dims.len() != 3 || t.dims[1] != RAW_SIDE || t.dims[2] != RAW_SIDE {
                return Err(Error::InvalidArgument(format!(
                    "expected N×28×28 images, got {:?}",
                    t.dims
                )));
            }
        }
        if train_images.dims[0] != train_labels.len() || test_images.dims[0] != test_labels.len() {
            return Err(Error::InvalidArgument(
                "image and label counts differ".into(),
            ));
        }
        let n_train = train_labels.len();
        let mut images = Vec::with_capacity((n_train + test_labels.len()) * POOLED_PIXELS);
        for raw in train_images
            .data
            .chunks_exact(RAW_SIDE * RAW_SIDE)
            .chain(test_images.data.chunks_exact(RAW_SIDE * RAW_SIDE))
        {
            images.extend(preprocess(raw)?);
        }
        let mut labels = train_labels.to_vec();
        labels.extend_from_slice(test_labels);
        let train_size = n_train.saturating_sub(VALIDATION_SIZE).min(TRAIN_SIZE);
        let (train, validation) = split(seed, n_train, train_size);
        let test = (n_train as u32..labels.len() as u32).collect();
        Self::from_parts(POOLED_PIXELS, images, labels, train, validation, test, seed)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// Number of output classes (largest label + 1, at least 2).
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.images[index * self.inputs..(index + 1) * self.inputs]
    }

    /// Indices of the lit pixels of image `index`.
    pub fn active(&self, index: usize) -> &[u32] {
        &self.active[self.active_offsets[index]..self.active_offsets[index + 1]]
    }

    pub fn label(&self, index: usize) -> usize {
        usize::from(self.labels[index])
    }

    pub fn indices(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::TestSubset => &self.test[..HARDWARE_SUBSET.min(self.test.len())],
        }
    }

    /// Serializes to the versioned binary cache format.
    ///
    /// Layout (all integers little endian):
    ///
    /// ```text
    /// "STSYNDS\0"  u32 version=1  u64 seed  u32 inputs  u32 count
    /// u32 n_train  u32 n_validation  u32 n_test
    /// count × ceil(inputs/8) bytes of images, bit-packed MSB first
    /// count bytes of labels
    /// split indices as u32 (train, validation, test)
    /// 32-byte SHA-256 of everything above
    /// ```
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in [
            self.inputs,
            self.len(),
            self.train.len(),
            self.validation.len(),
            self.test.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let row_bytes = self.inputs.div_ceil(8);
        for image in self.images.chunks_exact(self.inputs) {
            let mut packed = vec![0u8; row_bytes];
            for (j, &bit) in image.iter().enumerate() {
                packed[j / 8] |= bit << (7 - j % 8);
            }
            out.extend_from_slice(&packed);
        }
        out.extend_from_slice(&self.labels);
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            out.extend_from_slice(&i.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::from(DataError::BadCache(m.to_string()));
        if bytes.len() < 8 + 4 + 8 + 20 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut cursor = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let slice = body
                .get(cursor..cursor + n)
                .ok_or_else(|| bad("truncated"))?;
            cursor += n;
            Ok(slice)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut header = [0usize; 5];
        for h in &mut header {
            *h = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        let [inputs, count, n_train, n_val, n_test] = header;
        let row_bytes = inputs.div_ceil(8);
        let mut images = Vec::with_capacity(inputs * count);
        for _ in 0..count {
            let packed = take(row_bytes)?;
            images.extend((0..inputs).map(|j| (packed[j / 8] >> (7 - j % 8)) & 1));
        }
        let labels = take(count)?.to_vec();
        let mut read_indices = |n: usize| -> Result<Vec<u32>> {
            Ok(take(4 * n)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let train = read_indices(n_train)?;
        let validation = read_indices(n_val)?;
        let test = read_indices(n_test)?;
        if cursor != body.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_parts(inputs, images, labels, train, validation, test, seed)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(crate::error::io_err(path))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(crate::error::io_err(path))?;
        Self::from_cache_bytes(&bytes)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"STSYNDS\0";
const CACHE_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Finds the four MNIST files in `dir`, accepting raw or `.gz` names.
pub fn locate_mnist(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for (name, _) in MNIST_FILES {
        let raw = dir.join(name);
        let gz = dir.join(format!("{name}.gz"));
        if raw.is_file() {
            found.push(raw);
        } else if gz.is_file() {
            found.push(gz);
        } else {
            missing.push(name.to_string());
        }
    }
    if missing.is_empty() {
        Ok(found)
    } else {
        Err(DataError::MissingFiles {
            dir: dir.to_path_buf(),
            missing,
        })
    }
}
