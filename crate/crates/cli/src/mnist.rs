//! IDX reader for MNIST-style image and label files.

use std::path::Path;

use hsvr_core::net::Dataset;
use nalgebra::DMatrix;

use crate::error::CliError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<Idx, CliError> {
    if bytes.len() < 4 {
        return Err(CliError::Data("IDX file is truncated".into()));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(CliError::Data(format!(
            "IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(CliError::Data("IDX header is truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() - header < len {
        return Err(CliError::Data(format!(
            "IDX payload has {} bytes, header declares {len}",
            bytes.len() - header
        )));
    }
    Ok(Idx {
        dims,
        data: bytes[header..header + len].to_vec(),
    })
}

/// Images as rows of pixels in `[0, 1]`, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplit {
    pub pixels: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn parse_split(images: &[u8], labels: &[u8]) -> Result<RawSplit, CliError> {
    let img = parse_idx(images, IMAGES_MAGIC)?;
    let lab = parse_idx(labels, LABELS_MAGIC)?;
    let (count, len) = (img.dims[0], img.dims[1] * img.dims[2]);
    if lab.dims[0] != count {
        return Err(CliError::Data(format!("{count} images but {} labels", lab.dims[0])));
    }
    let pixels = img
        .data
        .chunks_exact(len.max(1))
        .take(count)
        .map(|row| row.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    Ok(RawSplit {
        pixels,
        labels: lab.data.iter().map(|&l| l as usize).collect(),
    })
}

fn read(dir: &Path, names: &[&str]) -> Result<Vec<u8>, CliError> {
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            return std::fs::read(&path).map_err(|e| CliError::io(&path, e));
        }
    }
    Err(CliError::Data(format!("none of {names:?} found in {}", dir.display())))
}

pub fn read_split(dir: &Path, prefix: &str) -> Result<RawSplit, CliError> {
    let images = read(
        dir,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    )?;
    let labels = read(
        dir,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    )?;
    parse_split(&images, &labels)
}

/// Pixel mean and standard deviation over a whole split.
pub fn pixel_stats(split: &RawSplit) -> (f64, f64) {
    let count = split.pixels.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mean = split.pixels.iter().flatten().sum::<f64>() / count;
    let var = split.pixels.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    (mean, var.sqrt().max(1e-12))
}

/// Normalized `1 × 784` sequences for the given rows of `split`.
pub fn to_dataset(split: &RawSplit, rows: &[usize], mean: f64, std: f64, classes: usize) -> Result<Dataset, CliError> {
    let inputs = rows
        .iter()
        .map(|&i| {
            let px = &split.pixels[i];
            DMatrix::from_iterator(1, px.len(), px.iter().map(|v| (v - mean) / std))
        })
        .collect();
    let labels = rows.iter().map(|&i| split.labels[i]).collect();
    Ok(Dataset::new(inputs, labels, classes)?)
}

/// Train and eval datasets from an MNIST directory.
///
/// Normalization statistics come from the full training split. `train_count`
/// and `eval_count` pick seeded subsets; `None` keeps everything.
pub fn load_mnist(
    dir: &Path,
    train_count: Option<usize>,
    eval_count: Option<usize>,
    seed: u64,
) -> Result<(Dataset, Dataset), CliError> {
    let train = read_split(dir, "train")?;
    let test = read_split(dir, "t10k")?;
    let (mean, std) = pixel_stats(&train);
    let all_train: Vec<usize> = (0..train.labels.len()).collect();
    let all_test: Vec<usize> = (0..test.labels.len()).collect();
    let train_ds = to_dataset(&train, &all_train, mean, std, 10)?;
    let test_ds = to_dataset(&test, &all_test, mean, std, 10)?;
    let pick = |ds: Dataset, count: Option<usize>, s: u64| match count {
        Some(c) if c < ds.len() => ds.sample(c, s),
        _ => ds,
    };
    Ok((
        pick(train_ds, train_count, seed),
        pick(test_ds, eval_count, seed.wrapping_add(1)),
    ))
}
