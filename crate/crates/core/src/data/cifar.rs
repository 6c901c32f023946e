//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ImageRecord, ImageSet};
use crate::error::{QuanError, Result};

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + 3 * PLANE;
pub const CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Parses a batch held in memory; `source` names it in errors.
pub fn parse_cifar10(bytes: &[u8], source: &str) -> Result<Vec<ImageRecord>> {
    if bytes.len() % RECORD_BYTES != 0 {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(QuanError::format(
            source,
            format!(
                "truncated record at byte offset {offset}: {} of {RECORD_BYTES} bytes present",
                bytes.len() - offset
            ),
        ));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(n, rec)| {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(QuanError::format(
                    source,
                    format!("label {label} at byte offset {} exceeds 9", n * RECORD_BYTES),
                ));
            }
            let (r, rest) = rec[1..].split_at(PLANE);
            let (g, b) = rest.split_at(PLANE);
            let mut pixels = Vec::with_capacity(3 * PLANE);
            for i in 0..PLANE {
                pixels.extend_from_slice(&[r[i], g[i], b[i]]);
            }
            Ok(ImageRecord {
                height: SIDE,
                width: SIDE,
                pixels,
                label,
            })
        })
        .collect()
}

pub fn load_cifar10_file(path: &Path) -> Result<Vec<ImageRecord>> {
    let bytes = fs::read(path).map_err(|e| QuanError::io(path, e))?;
    parse_cifar10(&bytes, &path.display().to_string())
}

/// Serializes records in the batch format.
pub fn encode_cifar10(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        if r.height != SIDE || r.width != SIDE || r.label >= CLASSES {
            return Err(QuanError::Shape(format!(
                "CIFAR-10 records are 32x32 with labels below 10, got {}x{} label {}",
                r.height, r.width, r.label
            )));
        }
        out.push(r.label as u8);
        for c in 0..3 {
            out.extend(r.pixels.iter().skip(c).step_by(3));
        }
    }
    Ok(out)
}

pub fn write_cifar10_file(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let bytes = encode_cifar10(records)?;
    let mut f = fs::File::create(path).map_err(|e| QuanError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| QuanError::io(path, e))
}

/// Training and test splits.
#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: ImageSet,
    pub test: ImageSet,
}

/// Loads every `data_batch_N.bin` present in `dir` plus `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    let mut train = Vec::new();
    let mut found = 0;
    for name in TRAIN_FILES {
        let path = dir.join(name);
        if path.is_file() {
            train.extend(load_cifar10_file(&path)?);
            found += 1;
        }
    }
    if found == 0 {
        let path = dir.join(TRAIN_FILES[0]);
        return Err(QuanError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 training batch found"),
        ));
    }
    let test = load_cifar10_file(&dir.join(TEST_FILE))?;
    Ok(Cifar10 {
        train: ImageSet::new(train, CLASSES)?,
        test: ImageSet::new(test, CLASSES)?,
    })
}
