//! Reader and writer for the IDX image/label file pair format.
//!
//! Images: magic 0x00000803, then item count, rows and cols as big-endian
//! u32, then one unsigned byte per pixel. Labels: magic 0x00000801, item
//! count, one byte per label. Pixels are scaled into [0, 1] on load.

use super::Dataset;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, offset: 0 }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        if self.bytes.len() < self.offset + 4 {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("file truncated while reading {what}"),
            ));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn read_body(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + len {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!(
                    "file truncated: {what} needs {len} bytes at offset {}, file has {}",
                    self.offset,
                    self.bytes.len()
                ),
            ));
        }
        let body = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(body)
    }
}

/// Loads an image/label IDX pair into a dataset. Pixel bytes are scaled by
/// 1/255; the class count is inferred as one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let mut img = Cursor::new(&image_bytes);
    let magic = img.read_u32("image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = img.read_u32("image count")? as usize;
    let rows = img.read_u32("row count")? as usize;
    let cols = img.read_u32("column count")? as usize;
    let pixels = img.read_body(n * rows * cols, "pixel data")?;

    let label_bytes = fs::read(labels_path)?;
    let mut lab = Cursor::new(&label_bytes);
    let magic = lab.read_u32("label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            0,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = lab.read_u32("label count")? as usize;
    if n_labels != n {
        return Err(Error::format(
            4,
            format!("image file lists {n} items but label file lists {n_labels}"),
        ));
    }
    let labels_raw = lab.read_body(n, "label data")?;

    let inputs: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, rows * cols, classes)
}

/// Writes a dataset as an IDX pair. Features must lie in [0, 1]; each is
/// stored as `round(v * 255)`, so data loaded from an IDX pair round-trips
/// losslessly. The image shape is recorded as `input_dim x 1`.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let d = dataset.input_dim();
    let n = dataset.len();
    let mut image_bytes = Vec::with_capacity(16 + n * d);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(d as u32).to_be_bytes());
    image_bytes.extend_from_slice(&1u32.to_be_bytes());
    for &v in dataset.inputs() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "feature value {v} outside [0, 1] cannot be stored as a byte"
            )));
        }
        image_bytes.push((v * 255.0).round() as u8);
    }

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in dataset.labels() {
        if l > u8::MAX as usize {
            return Err(Error::invalid(format!("label {l} does not fit in a byte")));
        }
        label_bytes.push(l as u8);
    }

    fs::write(images_path, image_bytes)?;
    fs::write(labels_path, label_bytes)?;
    Ok(())
}
