//! CIFAR-style binary records and the plain-text meta sidecar.
//!
//! A record is one label byte followed by `C·H·W` pixel bytes, channel
//! planes in order, each plane row-major. Pixel byte `p` decodes to `p/255`.

use std::fmt;
use std::path::Path;

use super::ImageDataset;
use crate::error::{Error, Result};

pub const LAYOUT: &str = "label_then_channel_planar_row_major";

/// Contents of the `key = value` sidecar describing a binary dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for DatasetMeta {
    /// CIFAR-10.
    fn default() -> Self {
        Self {
            num_classes: 10,
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

impl DatasetMeta {
    pub fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = DatasetMeta::default();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse { offset: here, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| err(format!("`{k}` needs a positive integer, got `{v}`")));
            match k {
                "num_classes" => meta.num_classes = num()?,
                "height" => meta.height = num()?,
                "width" => meta.width = num()?,
                "channels" => meta.channels = num()?,
                "label_bytes" if v == "1" => {}
                "layout" if v == LAYOUT => {}
                "label_bytes" | "layout" => return Err(err(format!("unsupported {k} `{v}`"))),
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        if meta.num_classes > 256 {
            return Err(Error::Parse {
                offset: 0,
                message: "a one-byte label supports at most 256 classes".into(),
            });
        }
        Ok(meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(s) => Self::parse(&s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Missing(path.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl fmt::Display for DatasetMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "num_classes = {}", self.num_classes)?;
        writeln!(f, "height = {}", self.height)?;
        writeln!(f, "width = {}", self.width)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "label_bytes = 1")?;
        writeln!(f, "layout = {LAYOUT}")
    }
}

pub fn parse_cifar_binary(bytes: &[u8], meta: &DatasetMeta) -> Result<ImageDataset> {
    let rec = meta.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Parse {
            offset: (bytes.len() / rec * rec) as u64,
            message: format!("truncated record: {} trailing bytes of a {rec}-byte record", bytes.len() % rec),
        });
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * (rec - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[0] as usize;
        if label >= meta.num_classes {
            return Err(Error::Parse {
                offset: (i * rec) as u64,
                message: format!("label {label} >= num_classes {}", meta.num_classes),
            });
        }
        labels.push(label);
        images.extend(r[1..].iter().map(|&p| p as f32 / 255.0));
    }
    ImageDataset::new(meta.channels, meta.height, meta.width, meta.num_classes, images, labels)
}

pub fn load_cifar_binary(path: &Path, meta: &DatasetMeta) -> Result<ImageDataset> {
    match std::fs::read(path) {
        Ok(b) => parse_cifar_binary(&b, meta),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::Missing(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Encodes pixels as `round(255·v)` clamped to a byte.
pub fn write_cifar_binary(ds: &ImageDataset) -> Vec<u8> {
    let per = ds.image_len();
    let mut out = Vec::with_capacity(ds.len() * (per + 1));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.image(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}
