use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::LabeledDataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(path: &Path, cur: &mut Cursor<&[u8]>, fields: usize) -> Result<Vec<u32>> {
    (0..fields)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map_err(|_| Error::TruncatedFile(path.to_path_buf()))
        })
        .collect()
}

fn check_magic(path: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = read_file(images_path)?;
    let mut cur = Cursor::new(image_bytes.as_slice());
    let head = header(images_path, &mut cur, 1)?;
    check_magic(images_path, head[0], IMAGE_MAGIC)?;
    let dims = header(images_path, &mut cur, 3)?;
    let (count, rows, cols) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let pixels = &image_bytes[16..];
    let dim = rows * cols;
    if pixels.len() < count * dim {
        return Err(Error::TruncatedFile(images_path.to_path_buf()));
    }

    let label_bytes = read_file(labels_path)?;
    let mut cur = Cursor::new(label_bytes.as_slice());
    let head = header(labels_path, &mut cur, 2)?;
    check_magic(labels_path, head[0], LABEL_MAGIC)?;
    let label_count = head[1] as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let raw_labels = &label_bytes[8..];
    if raw_labels.len() < count {
        return Err(Error::TruncatedFile(labels_path.to_path_buf()));
    }

    let features = pixels[..count * dim].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels[..count].iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(features, dim, labels, num_classes)
}
