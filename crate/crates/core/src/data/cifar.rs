//! Readers and writers for the canonical CIFAR-10/100 binary batches.
//!
//! CIFAR-10 records are 3073 bytes: one label byte, then 1024 R, 1024 G and
//! 1024 B bytes, each plane row-major. CIFAR-100 records are 3074 bytes: a
//! coarse label byte, a fine label byte, then the same pixel layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, SplitTag, CIFAR_SHAPE};
use crate::error::{Error, Result};

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";

const PIXELS: usize = 3 * 32 * 32;
const CIFAR10_RECORD: usize = PIXELS + 1;
const CIFAR100_RECORD: usize = PIXELS + 2;
const CIFAR10_PER_FILE: usize = 10_000;
const CIFAR100_TRAIN_RECORDS: usize = 50_000;
const TEST_RECORDS: usize = 10_000;

/// Test images get ids from this offset so they never collide with
/// training ids.
pub const TEST_ID_OFFSET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    /// Require the canonical record counts (10000 per CIFAR-10 file, 50000 +
    /// 10000 for CIFAR-100). When off, any whole number of records is read.
    pub strict_counts: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict_counts: true }
    }
}

struct Layout {
    record: usize,
    label_offset: usize,
    classes: usize,
}

fn read_file(
    dir: &Path,
    name: &str,
    layout: &Layout,
    expected_records: usize,
    opts: LoadOptions,
    pixels: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if opts.strict_counts {
        let want = expected_records * layout.record;
        if bytes.len() != want {
            return Err(Error::format(
                name,
                format!(
                    "expected {want} bytes ({expected_records} records), found {}",
                    bytes.len()
                ),
            ));
        }
    } else if bytes.is_empty() || bytes.len() % layout.record != 0 {
        return Err(Error::format(
            name,
            format!(
                "size {} is not a positive multiple of the {}-byte record",
                bytes.len(),
                layout.record
            ),
        ));
    }
    for (r, rec) in bytes.chunks_exact(layout.record).enumerate() {
        let label = rec[layout.label_offset] as usize;
        if label >= layout.classes {
            return Err(Error::format(
                name,
                format!("record {r} has label {label}, expected < {}", layout.classes),
            ));
        }
        labels.push(label);
        pixels.extend(rec[layout.record - PIXELS..].iter().map(|&b| b as f32));
    }
    Ok(())
}

fn assemble(pixels: Vec<f32>, labels: Vec<usize>, classes: usize, part: CifarPart, source: String) -> Result<Dataset> {
    let n = labels.len() as u64;
    let (ids, split) = match part {
        CifarPart::Train => ((0..n).collect(), SplitTag::Train),
        CifarPart::Test => ((TEST_ID_OFFSET..TEST_ID_OFFSET + n).collect(), SplitTag::Test),
    };
    Dataset::new(
        CIFAR_SHAPE,
        pixels,
        labels,
        ids,
        classes,
        split,
        Provenance {
            source,
            distortion: None,
        },
    )
}

/// Loads the training pool (five batches, in order) or the test batch from a
/// `cifar-10-batches-bin` directory.
pub fn load_cifar10(dir: &Path, part: CifarPart, opts: LoadOptions) -> Result<Dataset> {
    let layout = Layout {
        record: CIFAR10_RECORD,
        label_offset: 0,
        classes: 10,
    };
    let files: &[&str] = match part {
        CifarPart::Train => &CIFAR10_TRAIN_FILES,
        CifarPart::Test => &[CIFAR10_TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        read_file(dir, name, &layout, CIFAR10_PER_FILE, opts, &mut pixels, &mut labels)?;
    }
    assemble(pixels, labels, 10, part, format!("cifar10:{}", dir.display()))
}

/// Loads a CIFAR-100 split with fine labels from a `cifar-100-binary`
/// directory.
pub fn load_cifar100(dir: &Path, part: CifarPart, opts: LoadOptions) -> Result<Dataset> {
    let layout = Layout {
        record: CIFAR100_RECORD,
        label_offset: 1,
        classes: 100,
    };
    let (name, expected) = match part {
        CifarPart::Train => (CIFAR100_TRAIN_FILE, CIFAR100_TRAIN_RECORDS),
        CifarPart::Test => (CIFAR100_TEST_FILE, TEST_RECORDS),
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    read_file(dir, name, &layout, expected, opts, &mut pixels, &mut labels)?;
    assemble(pixels, labels, 100, part, format!("cifar100:{}", dir.display()))
}

fn check_encodable(ds: &Dataset, classes: usize) -> Result<()> {
    if ds.image_shape != CIFAR_SHAPE || ds.class_count != classes {
        return Err(Error::Usage(format!(
            "only {classes}-class 3x32x32 datasets can be written as CIFAR batches"
        )));
    }
    Ok(())
}

fn pixel_bytes(image: &[f32]) -> impl Iterator<Item = u8> + '_ {
    image.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)
}

/// Encodes images as CIFAR-10 records; pixel values are rounded to bytes.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    check_encodable(ds, 10)?;
    let mut out = Vec::with_capacity(ds.len() * CIFAR10_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(pixel_bytes(ds.image(i)));
    }
    Ok(out)
}

/// Encodes images as CIFAR-100 records with `coarse(fine)` as coarse label.
pub fn encode_cifar100(ds: &Dataset, coarse: impl Fn(usize) -> u8) -> Result<Vec<u8>> {
    check_encodable(ds, 100)?;
    let mut out = Vec::with_capacity(ds.len() * CIFAR100_RECORD);
    for i in 0..ds.len() {
        out.push(coarse(ds.labels[i]));
        out.push(ds.labels[i] as u8);
        out.extend(pixel_bytes(ds.image(i)));
    }
    Ok(out)
}

/// Writes a CIFAR-10 directory: the training pool split as evenly as possible
/// over the five batch files, and the test set. Record counts are canonical
/// only if the inputs hold 50000 and 10000 images.
pub fn write_cifar10_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = train.len();
    for (k, name) in CIFAR10_TRAIN_FILES.iter().enumerate() {
        let idx: Vec<usize> = (k * n / 5..(k + 1) * n / 5).collect();
        let path = dir.join(name);
        std::fs::write(&path, encode_cifar10(&train.subset(&idx))?).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(CIFAR10_TEST_FILE);
    std::fs::write(&path, encode_cifar10(test)?).map_err(|e| Error::io(&path, e))
}
