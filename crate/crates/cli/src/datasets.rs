//! Dataset ingestion and generation.
//!
//! Three sources feed the pipeline: standard big-endian IDX image/label
//! files, CSV rows of `label,pixel,...`, and seeded 2-D Gaussian blobs. A
//! synthetic digit generator writes IDX files of its own, so image-scale
//! experiments run without downloading anything.

use std::path::{Path, PathBuf};

use samurai_core::network::LabeledDataset;
use samurai_core::rng::SplitMix64;
use samurai_core::{Error, Result, Tensor};

use crate::config::DatasetConfig;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Which half of the dataset a command works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Big-endian reader over an IDX file body with offset-carrying errors.
struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> IdxReader<'a> {
        IdxReader {
            bytes,
            offset: 0,
            path,
        }
    }

    fn take(&mut self, count: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < count {
            return Err(Error::format_at(
                format!("{}: truncated while reading {what}", self.path.display()),
                self.offset as u64,
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + count];
        self.offset += count;
        Ok(slice)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let slice = self.take(4, what)?;
        Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::format_at(
                format!(
                    "{}: {} trailing bytes after the declared contents",
                    self.path.display(),
                    self.bytes.len() - self.offset
                ),
                self.offset as u64,
            ));
        }
        Ok(())
    }
}

/// Parses an IDX image file into tensors of shape `[1, rows, cols]` with
/// pixels scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.u32_be("image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format_at(
            format!(
                "{}: image magic mismatch, expected {IDX_IMAGE_MAGIC:#010x} got {magic:#010x}",
                path.display()
            ),
            0,
        ));
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(format!(
            "{}: zero image dimensions {rows}x{cols}",
            path.display()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let pixels = r.take(rows * cols, &format!("image {i}"))?;
        let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        images.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    r.expect_end()?;
    Ok(images)
}

/// Parses an IDX label file. Labels must fit the ten-class digit range.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = IdxReader::new(&bytes, path);
    let magic = r.u32_be("label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format_at(
            format!(
                "{}: label magic mismatch, expected {IDX_LABEL_MAGIC:#010x} got {magic:#010x}",
                path.display()
            ),
            0,
        ));
    }
    let count = r.u32_be("label count")? as usize;
    let raw = r.take(count, "labels")?;
    r.expect_end()?;
    raw.iter()
        .map(|&l| {
            if l > 9 {
                Err(Error::LabelOutOfRange {
                    label: l as usize,
                    class_count: 10,
                })
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

fn read_idx_dataset(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let inputs = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    LabeledDataset::new(inputs, labels, 10)
}

/// Parses CSV rows of `label,pixel,pixel,...`; each row is reshaped to
/// `input_shape`.
pub fn read_csv_dataset(
    path: &Path,
    classes: usize,
    input_shape: &[usize],
) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let element_count: usize = input_shape.iter().product();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (line_index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line_index + 1;
        let mut fields = line.split(',');
        let label_text = fields.next().unwrap_or("");
        let label: usize = label_text.trim().parse().map_err(|_| {
            Error::format(format!(
                "{}: row {row}: bad label {label_text:?}",
                path.display()
            ))
        })?;
        let values: Vec<f64> = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("{}: row {row}: bad pixel {f:?}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != element_count {
            return Err(Error::format(format!(
                "{}: row {row}: {} pixels, the model input needs {element_count}",
                path.display(),
                values.len()
            )));
        }
        inputs.push(Tensor::new(input_shape.to_vec(), values)?);
        labels.push(label);
    }
    LabeledDataset::new(inputs, labels, classes)
}

/// Seeded 2-D Gaussian blobs: class `i % 2`, centers (1,1) and (-1,-1),
/// the given standard deviation on both coordinates.
pub fn synthetic_blobs(count: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::invalid("blob spread must be a positive finite number"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 2;
        let center = if class == 0 { 1.0 } else { -1.0 };
        let x = center + spread * rng.gaussian();
        let y = center + spread * rng.gaussian();
        inputs.push(Tensor::new(vec![2], vec![x, y])?);
        labels.push(class);
    }
    LabeledDataset::new(inputs, labels, 2)
}

/// Loads the requested split. Blob test data is drawn from `seed + 1`, so
/// the splits never share points.
pub fn ingest_dataset(
    config: &DatasetConfig,
    split: Split,
    seed: u64,
    input_shape: &[usize],
) -> Result<LabeledDataset> {
    match config {
        DatasetConfig::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => match split {
            Split::Train => read_idx_dataset(train_images, train_labels),
            Split::Test => read_idx_dataset(test_images, test_labels),
        },
        DatasetConfig::Csv {
            train,
            test,
            classes,
        } => {
            let path = match split {
                Split::Train => train,
                Split::Test => test,
            };
            read_csv_dataset(path, *classes, input_shape)
        }
        DatasetConfig::SyntheticBlobs {
            train_count,
            test_count,
            spread,
        } => match split {
            Split::Train => synthetic_blobs(*train_count, *spread, seed),
            Split::Test => synthetic_blobs(*test_count, *spread, seed.wrapping_add(1)),
        },
    }
}

/// The four files written by `write_synthetic_digit_idx`.
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Renders one 28x28 synthetic digit. Each class is a fixed constellation of
/// three Gaussian bumps; samples jitter the bump centers, amplitudes, and
/// widths, then add pixel noise.
fn digit_image(class: usize, rng: &mut SplitMix64) -> Vec<u8> {
    let mut constellation = SplitMix64::new(9000 + 31 * class as u64);
    let mut bumps = [(0.0f64, 0.0f64, 0.0f64, 0.0f64); 3];
    for bump in &mut bumps {
        let cx = constellation.uniform(7.0, 21.0);
        let cy = constellation.uniform(7.0, 21.0);
        let amplitude = constellation.uniform(0.7, 1.0);
        let sigma = constellation.uniform(2.0, 3.0);
        *bump = (cx, cy, amplitude, sigma);
    }
    let mut pixels = vec![0.0f64; 28 * 28];
    for &(cx, cy, amplitude, sigma) in &bumps {
        let jx = cx + 1.2 * rng.gaussian();
        let jy = cy + 1.2 * rng.gaussian();
        let amp = amplitude * (1.0 + 0.15 * rng.gaussian());
        let sig = (sigma + 0.3 * rng.gaussian()).max(1.0);
        let denom = 2.0 * sig * sig;
        for row in 0..28 {
            for col in 0..28 {
                let dx = col as f64 - jx;
                let dy = row as f64 - jy;
                pixels[row * 28 + col] += amp * (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    pixels
        .iter()
        .map(|&v| {
            let noisy = (v + 0.02 * rng.gaussian()).clamp(0.0, 1.0);
            (noisy * 255.0).round() as u8
        })
        .collect()
}

fn write_idx_images(path: &Path, images: &[Vec<u8>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + images.len() * 28 * 28);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    for image in images {
        bytes.extend_from_slice(image);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a complete synthetic digit dataset as standard IDX files (classes
/// cycle 0..=9). Test images draw from `seed + 1`.
pub fn write_synthetic_digit_idx(
    dir: &Path,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<IdxPaths> {
    let paths = IdxPaths {
        train_images: dir.join("train-images.idx"),
        train_labels: dir.join("train-labels.idx"),
        test_images: dir.join("test-images.idx"),
        test_labels: dir.join("test-labels.idx"),
    };
    for (count, rng_seed, images_path, labels_path) in [
        (train_count, seed, &paths.train_images, &paths.train_labels),
        (
            test_count,
            seed.wrapping_add(1),
            &paths.test_images,
            &paths.test_labels,
        ),
    ] {
        let mut rng = SplitMix64::new(rng_seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % 10;
            images.push(digit_image(class, &mut rng));
            labels.push(class as u8);
        }
        write_idx_images(images_path, &images)?;
        write_idx_labels(labels_path, &labels)?;
    }
    Ok(paths)
}
