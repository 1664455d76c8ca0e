use std::fs;
use std::path::Path;

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};

/// One label byte followed by 32x32 R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

pub fn parse_cifar_binary(files: &[&[u8]]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut base = 0;
    for bytes in files {
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::parse(
                base + bytes.len() - bytes.len() % CIFAR_RECORD_BYTES,
                format!("file size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = rec[0] as usize;
            if label >= CLASSES {
                return Err(Error::parse(base + r * CIFAR_RECORD_BYTES, format!("label out of range: {label}")));
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
        }
        base += bytes.len();
    }
    Dataset::from_raw(pixels, labels, 3, 32, 32, CLASSES, Split::Train, Provenance::CifarBinary)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let files = paths.iter().map(fs::read).collect::<std::io::Result<Vec<_>>>()?;
    let refs: Vec<&[u8]> = files.iter().map(Vec::as_slice).collect();
    parse_cifar_binary(&refs)
}
