//! Dataset ingestion and grayscale image I/O.
//!
//! Pixels are normalized linearly from byte range `[0, 255]` to `[-1, 1]`;
//! outputs clamp back to that range and quantize to bytes. MNIST-style IDX
//! containers are parsed bit-exactly (big-endian magic, dims, raw bytes) and
//! written images are binary P5 graymaps with maxval 255.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::ImageSignal;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// An immutable collection of same-shaped images in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageSignal>,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Vec<ImageSignal>, source: impl Into<String>) -> Result<Self> {
        let source = source.into();
        if images.is_empty() {
            return Err(Error::EmptyDataset(source));
        }
        let (rows, cols) = (images[0].rows(), images[0].cols());
        for img in &images {
            if img.rows() != rows || img.cols() != cols {
                return Err(Error::shape(
                    "Dataset::new",
                    format!("{rows}x{cols}"),
                    format!("{}x{}", img.rows(), img.cols()),
                ));
            }
        }
        Ok(Self { images, source })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.images[0].rows(), self.images[0].cols())
    }

    /// First `train` images for training, the next `test` for testing.
    pub fn split(&self, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
        if train == 0 || test == 0 || train + test > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} images into {train} train + {test} test",
                self.len()
            )));
        }
        Ok((
            Dataset::new(self.images[..train].to_vec(), format!("{}[train]", self.source))?,
            Dataset::new(
                self.images[train..train + test].to_vec(),
                format!("{}[test]", self.source),
            )?,
        ))
    }
}

pub fn byte_to_unit(b: u8) -> f64 {
    2.0 * f64::from(b) / 255.0 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    let clamped = v.clamp(-1.0, 1.0);
    ((clamped + 1.0) * 255.0 / 2.0).round() as u8
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX image container (magic 0x00000803, big-endian dims, raw
/// unsigned bytes) into at most `limit` normalized images. Labels are ignored
/// throughout this crate, so only the image file is read.
pub fn load_mnist_idx(images_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(images_path)?;
    let magic = read_be_u32(&bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            actual: magic,
        });
    }
    let count = read_be_u32(&bytes, 4)? as usize;
    let rows = read_be_u32(&bytes, 8)? as usize;
    let cols = read_be_u32(&bytes, 12)? as usize;
    let header = 16;
    let expected = header + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let take = limit.map_or(count, |l| l.min(count));
    if take == 0 {
        return Err(Error::EmptyDataset(images_path.display().to_string()));
    }
    let mut images = Vec::with_capacity(take);
    for i in 0..take {
        let start = header + i * rows * cols;
        let pixels = &bytes[start..start + rows * cols];
        // IDX stores row-major pixel order.
        let mut img = ImageSignal::zeros(rows, cols);
        for h in 0..rows {
            for k in 0..cols {
                img.set(h, k, byte_to_unit(pixels[h * cols + k]));
            }
        }
        images.push(img);
    }
    Dataset::new(images, images_path.display().to_string())
}

/// Loads every decodable raster image under `path` (non-recursive, sorted by
/// file name), converting RGB to grayscale with luminance weights
/// 0.299/0.587/0.114 and rescaling to `[-1, 1]`. Unreadable files are skipped
/// with a warning on stderr.
pub fn load_image_dir(path: &Path) -> Result<Dataset> {
    let mut entries: Vec<_> = fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    let mut images = Vec::new();
    for file in &entries {
        match image::open(file) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let mut out = ImageSignal::zeros(h as usize, w as usize);
                for (x, y, px) in rgb.enumerate_pixels() {
                    let lum = 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]);
                    out.set(y as usize, x as usize, 2.0 * lum / 255.0 - 1.0);
                }
                images.push(out);
            }
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", file.display());
            }
        }
    }
    Dataset::new(images, path.display().to_string())
}

/// Seeded synthetic desk-scale images: a dark background with a few bright
/// rectangles and soft blobs, clipped to `[-1, 1]`. A pure function of
/// `(seed, count, rows, cols)`.
pub fn synth_dataset(seed: u64, count: usize, rows: usize, cols: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::EmptyDataset(format!("synthetic(seed={seed})")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "image shape must be positive, got {rows}x{cols}"
        )));
    }
    let mut images = Vec::with_capacity(count);
    for idx in 0..count {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(idx as u64).to_le_bytes());
        key[16..24].copy_from_slice(&0x53594e_54485f_31u64.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);

        let mut img = ImageSignal::zeros(rows, cols);
        for h in 0..rows {
            for k in 0..cols {
                img.set(h, k, -1.0);
            }
        }
        // Full-height bars give the images strong cross-row structure: the
        // top third of every image stays predictable from the rows below it,
        // which keeps desk-scale inpainting well posed.
        let n_rects = rng.gen_range(2..=4);
        for _ in 0..n_rects {
            let h1 = rng.gen_range((3 * rows / 4).max(1)..=rows);
            let k0 = rng.gen_range(0..cols);
            let k1 = (k0 + rng.gen_range(2..=(cols / 3).max(2))).min(cols);
            let value = rng.gen_range(0.3..1.0);
            for h in 0..h1 {
                for k in k0..k1 {
                    img.set(h, k, value);
                }
            }
        }
        // Soft blob anchored low enough that its tail into the top rows stays
        // small.
        if rng.gen_bool(0.5) {
            let ch = rng.gen_range(rows as f64 * 0.55..rows as f64);
            let ck = rng.gen_range(0.0..cols as f64);
            let radius = rng.gen_range(rows as f64 / 5.0..rows as f64 / 3.0);
            let amp = rng.gen_range(0.4..1.0);
            for h in 0..rows {
                for k in 0..cols {
                    let d2 = (h as f64 - ch).powi(2) + (k as f64 - ck).powi(2);
                    let bump = amp * (-d2 / (2.0 * radius * radius)).exp();
                    let v = (img.get(h, k) + bump).clamp(-1.0, 1.0);
                    img.set(h, k, v);
                }
            }
        }
        images.push(img);
    }
    Dataset::new(images, format!("synthetic(seed={seed},count={count},{rows}x{cols})"))
}

/// Writes `u` as a binary P5 graymap (maxval 255), clamped to `[-1, 1]`.
pub fn save_image(u: &ImageSignal, path: &Path) -> Result<()> {
    save_image_grid(&[vec![u.clone()]], path)
}

/// Writes a tiled grid of images as one P5 graymap: one grid row per entry of
/// `rows` (originals / inputs / reconstructions in the experiment reports),
/// tiles separated by a single mid-gray pixel line.
pub fn save_image_grid(rows: &[Vec<ImageSignal>], path: &Path) -> Result<()> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("empty image grid".into()));
    }
    let (ih, iw) = (rows[0][0].rows(), rows[0][0].cols());
    let ncols = rows.iter().map(|r| r.len()).max().expect("nonempty");
    for row in rows {
        for img in row {
            if img.rows() != ih || img.cols() != iw {
                return Err(Error::shape(
                    "save_image_grid",
                    format!("{ih}x{iw}"),
                    format!("{}x{}", img.rows(), img.cols()),
                ));
            }
        }
    }
    let gap = 1;
    let total_h = rows.len() * ih + (rows.len() - 1) * gap;
    let total_w = ncols * iw + (ncols - 1) * gap;
    let mut pixels = vec![128u8; total_h * total_w];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let oy = ri * (ih + gap);
            let ox = ci * (iw + gap);
            for h in 0..ih {
                for k in 0..iw {
                    pixels[(oy + h) * total_w + ox + k] = unit_to_byte(img.get(h, k));
                }
            }
        }
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{total_w} {total_h}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Renders every kernel of a bank as a tiled grid, each kernel rescaled so
/// its own extreme value maps to full contrast (weights visualization).
pub fn save_kernel_grid(banks: &[&crate::linops::ConvKernelBank], path: &Path) -> Result<()> {
    let mut grid_rows = Vec::new();
    for bank in banks {
        let (kh, kw) = bank.kernel_shape();
        let mut row = Vec::new();
        for c in 0..bank.channels() {
            let mut img = ImageSignal::zeros(kh, kw);
            let peak = bank
                .kernels()
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .fold(0.0f64, |acc, v| acc.max(v.abs()))
                .max(1e-12);
            for i in 0..kh {
                for j in 0..kw {
                    img.set(i, j, bank.kernels()[[c, i, j]] / peak);
                }
            }
            row.push(img);
        }
        grid_rows.push(row);
    }
    save_image_grid(&grid_rows, path)
}
