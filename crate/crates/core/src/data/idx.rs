use std::fs;
use std::path::Path;

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};

const IMAGES_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x03];
const LABELS_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x01];

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::parse(bytes.len(), format!("truncated header: missing {what}")))
}

fn check_magic(bytes: &[u8], expect: [u8; 4], what: &str) -> Result<()> {
    match bytes.get(..4) {
        Some(m) if m == expect => Ok(()),
        Some(m) => Err(Error::parse(
            0,
            format!("wrong magic for {what}: expected {expect:02x?}, found {m:02x?}"),
        )),
        None => Err(Error::parse(bytes.len(), format!("truncated {what} file"))),
    }
}

/// Parses an IDX image file (u8, rank 3) and label file (u8, rank 1).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC, "images")?;
    let n = be_u32(images, 4, "image count")?;
    let h = be_u32(images, 8, "rows")?;
    let w = be_u32(images, 12, "cols")?;
    let need = 16 + n * h * w;
    if images.len() < need {
        return Err(Error::parse(images.len(), format!("truncated images: {n} images need {need} bytes")));
    }
    if images.len() > need {
        return Err(Error::parse(need, "trailing bytes after image data"));
    }
    check_magic(labels, LABELS_MAGIC, "labels")?;
    let n_labels = be_u32(labels, 4, "label count")?;
    if n_labels != n {
        return Err(Error::parse(4, format!("{n_labels} labels for {n} images")));
    }
    if labels.len() != 8 + n {
        return Err(Error::parse(labels.len().min(8 + n), format!("label file holds {} bytes, expected {}", labels.len(), 8 + n)));
    }
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let pixels = images[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::from_raw(pixels, labels, 1, h, w, classes, Split::Train, Provenance::Idx)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 0, 255, 255, 255, 0, 0]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        (img, lab)
    }

    #[test]
    fn two_image_fixture() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!((d.len(), d.channels, d.height, d.width), (2, 1, 2, 2));
        assert_eq!(d.labels(), &[1, 0]);
        // raw [0,1,0,1,1,1,0,0]: mean 0.5, std 0.5
        assert_eq!(d.norm.mean, vec![0.5]);
        assert_eq!(d.norm.std, vec![0.5]);
        assert_eq!(d.images(), &[-1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn wrong_magic_on_labels() {
        let (img, mut lab) = fixture();
        lab[3] = 3;
        let err = parse_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let (img, lab) = fixture();
        assert!(matches!(parse_idx(&img[..20], &lab), Err(Error::Parse { offset: 20, .. })));
        let mut lab3 = lab.clone();
        lab3[7] = 3;
        lab3.push(0);
        assert!(parse_idx(&img, &lab3).is_err());
    }
}
