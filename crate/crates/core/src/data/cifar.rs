//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green, and blue 32×32 planes in row-major order.

use std::fs;
use std::path::Path;

use super::{normalize, Dataset};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Data(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| normalize(b)));
    }
    Dataset::new(32, CLASSES, pixels, labels)
}

/// Reads every `data_batch_*.bin` in `dir` (the training split), in name
/// order.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    files.sort();
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = fs::read(f).map_err(|e| Error::io(f, e))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a multiple of {CIFAR_RECORD}",
                f.display(),
                chunk.len()
            )));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}
