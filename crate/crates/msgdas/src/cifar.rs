//! Reader for the CIFAR-10 binary batches (`data_batch_1.bin` ..
//! `data_batch_5.bin`). Each record is one label byte followed by 3072
//! pixel bytes: the 32×32 red plane, then green, then blue, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use msgdas_core::Tensor;

use crate::data::Dataset;
use crate::error::{io_err, HarnessError, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Decodes one batch file, which must hold exactly `expected` records.
pub fn read_batch_file(path: &Path, expected: usize) -> Result<Vec<RawRecord>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::Ingestion {
        path: path.to_path_buf(),
        offset: 0,
        detail: format!("cannot read file: {e}"),
    })?;
    if bytes.len() < expected * RECORD_BYTES {
        return Err(HarnessError::Ingestion {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            detail: format!(
                "truncated inside record {}: expected {expected} records of {RECORD_BYTES} bytes",
                bytes.len() / RECORD_BYTES
            ),
        });
    }
    if bytes.len() != expected * RECORD_BYTES {
        return Err(HarnessError::Ingestion {
            path: path.to_path_buf(),
            offset: (expected * RECORD_BYTES) as u64,
            detail: format!("trailing bytes after {expected} records"),
        });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(HarnessError::Ingestion {
                    path: path.to_path_buf(),
                    offset: (i * RECORD_BYTES) as u64,
                    detail: format!("label byte {} is not a CIFAR-10 class", rec[0]),
                });
            }
            Ok(RawRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CifarOptions {
    /// Keep the first `n` records of every class, in file order.
    pub subset_per_class: Option<usize>,
    /// Output side length; must divide 32.
    pub downsample_to: Option<usize>,
    pub records_per_file: usize,
}

impl Default for CifarOptions {
    fn default() -> Self {
        Self {
            subset_per_class: None,
            downsample_to: None,
            records_per_file: RECORDS_PER_FILE,
        }
    }
}

/// Loads the five training batches from `dir`.
pub fn load_cifar10_binary(dir: &Path, subset_per_class: Option<usize>, downsample_to: Option<usize>) -> Result<Dataset> {
    load_cifar10_with(
        dir,
        &CifarOptions {
            subset_per_class,
            downsample_to,
            ..CifarOptions::default()
        },
    )
}

pub fn load_cifar10_with(dir: &Path, opts: &CifarOptions) -> Result<Dataset> {
    let side = opts.downsample_to.unwrap_or(SIDE);
    if side == 0 || !SIDE.is_multiple_of(side) {
        return Err(HarnessError::Config(format!("downsample_to must divide {SIDE}, got {side}")));
    }
    if !dir.is_dir() {
        return Err(io_err(dir)(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "CIFAR-10 directory not found",
        )));
    }
    let mut taken = [0usize; NUM_CLASSES];
    let mut records = Vec::new();
    for name in TRAIN_FILES {
        let path: PathBuf = dir.join(name);
        for rec in read_batch_file(&path, opts.records_per_file)? {
            let y = rec.label as usize;
            if opts.subset_per_class.is_none_or(|cap| taken[y] < cap) {
                taken[y] += 1;
                records.push(rec);
            }
        }
    }
    if let Some(cap) = opts.subset_per_class {
        if let Some(y) = taken.iter().position(|&t| t < cap) {
            return Err(HarnessError::Config(format!(
                "class {y} has only {} images, {cap} requested",
                taken[y]
            )));
        }
    }

    let factor = SIDE / side;
    let plane = side * side;
    let mut data = Vec::with_capacity(records.len() * CHANNELS * plane);
    for rec in &records {
        for c in 0..CHANNELS {
            let src = &rec.pixels[c * SIDE * SIDE..(c + 1) * SIDE * SIDE];
            for i in 0..side {
                for j in 0..side {
                    let mut sum = 0u32;
                    for a in 0..factor {
                        for b in 0..factor {
                            sum += src[(i * factor + a) * SIDE + j * factor + b] as u32;
                        }
                    }
                    data.push(sum as f64 / (factor * factor) as f64 / 255.0);
                }
            }
        }
    }
    normalize_channels(&mut data, CHANNELS, plane);
    let n = records.len();
    let images = Tensor::new(vec![n, CHANNELS, side, side], data.into_iter().map(|v| v as f32).collect())?;
    let labels = records.iter().map(|r| r.label as usize).collect();
    Dataset::new("cifar10", NUM_CLASSES, images, labels)
}

/// Zero mean and unit variance per channel over the whole set.
fn normalize_channels(data: &mut [f64], channels: usize, plane: usize) {
    let per_image = channels * plane;
    for c in 0..channels {
        let vals = || {
            data.chunks(per_image)
                .flat_map(move |img| img[c * plane..(c + 1) * plane].iter().copied())
        };
        let count = (data.len() / per_image * plane) as f64;
        let mean = vals().sum::<f64>() / count;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let std = var.sqrt().max(1e-12);
        for img in data.chunks_mut(per_image) {
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v = (*v - mean) / std;
            }
        }
    }
}
