//! Converters from the public datasets' native distributions into the
//! simulator's on-disk format.
//!
//! - FashionMNIST: IDX ubyte files (optionally gzipped), upsampled 28x28 -> 32x32.
//! - CIFAR-10: the binary-version batch files, channel-planar RGB.
//! - PathMNIST: the medmnist `.npz` archive of uint8 arrays, upsampled to 32x32.
//! - custom: a directory already in the simulator format, validated and copied.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::datasets::LabeledImageDataset;
use crate::error::{Error, Result};

pub const TARGET_SIZE: usize = 32;

/// Ingest `name` from `source` into `root/<name>/{train,test}`.
pub fn ingest(name: &str, source: &Path, root: &Path) -> Result<()> {
    for split in ["train", "test"] {
        let ds = match name {
            "fashionmnist" => ingest_fashionmnist(source, split)?,
            "cifar10" => ingest_cifar10(source, split)?,
            "pathmnist" => ingest_pathmnist(source, split)?,
            "custom" => {
                let ds = LabeledImageDataset::load(&source.join(split), "custom")?;
                ds.validate()?;
                ds
            }
            other => {
                return Err(Error::Argument(format!(
                    "unknown dataset {other:?} for ingest"
                )))
            }
        };
        ds.save(&crate::datasets::dataset_dir(root, name, split))?;
    }
    Ok(())
}

fn read_maybe_gz(path_plain: &Path) -> Result<Vec<u8>> {
    let gz = path_plain.with_extension(format!(
        "{}.gz",
        path_plain.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let (path, gzipped) = if path_plain.exists() {
        (path_plain.to_path_buf(), false)
    } else if gz.exists() {
        (gz, true)
    } else {
        return Err(Error::IngestFile {
            path: path_plain.to_path_buf(),
            reason: "file not found (nor a .gz variant)".into(),
        });
    };
    let raw = fs::read(&path).map_err(|e| Error::IngestFile {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if gzipped {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::IngestFile {
                path,
                reason: format!("gzip decode failed: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(Error::IngestFile {
            path: path.to_path_buf(),
            reason: "not an IDX3 image file".into(),
        });
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::IngestFile {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected, bytes.len()),
        });
    }
    Ok((bytes[16..].to_vec(), count, rows, cols))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(Error::IngestFile {
            path: path.to_path_buf(),
            reason: "not an IDX1 label file".into(),
        });
    }
    let count = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + count {
        return Err(Error::IngestFile {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", 8 + count, bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn ingest_fashionmnist(source: &Path, split: &str) -> Result<LabeledImageDataset> {
    let prefix = if split == "train" { "train" } else { "t10k" };
    let img_path = source.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = source.join(format!("{prefix}-labels-idx1-ubyte"));
    let (raw, count, rows, cols) = parse_idx_images(&read_maybe_gz(&img_path)?, &img_path)?;
    let labels_u8 = parse_idx_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels_u8.len() != count {
        return Err(Error::Ingest(format!(
            "fashionmnist {split}: {count} images vs {} labels",
            labels_u8.len()
        )));
    }
    let mut images = Vec::with_capacity(count * TARGET_SIZE * TARGET_SIZE);
    for i in 0..count {
        let src: Vec<f32> = raw[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.extend(bilinear_resize(&src, rows, cols, 1, TARGET_SIZE, TARGET_SIZE));
    }
    LabeledImageDataset::new(
        "fashionmnist",
        images,
        TARGET_SIZE,
        TARGET_SIZE,
        1,
        labels_u8.iter().map(|&l| l as u32).collect(),
        10,
    )
}

fn ingest_cifar10(source: &Path, split: &str) -> Result<LabeledImageDataset> {
    let files: Vec<String> = if split == "train" {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".to_string()]
    };
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = source.join(&f);
        let bytes = fs::read(&path).map_err(|e| Error::IngestFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::IngestFile {
                path,
                reason: format!("length {} not a multiple of {}", bytes.len(), RECORD),
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            labels.push(rec[0] as u32);
            let planes = &rec[1..];
            // channel-planar -> interleaved HWC
            for px in 0..32 * 32 {
                for ch in 0..3 {
                    images.push(planes[ch * 1024 + px] as f32 / 255.0);
                }
            }
        }
    }
    LabeledImageDataset::new("cifar10", images, 32, 32, 3, labels, 10)
}

fn ingest_pathmnist(source: &Path, split: &str) -> Result<LabeledImageDataset> {
    let path = if source.is_file() {
        source.to_path_buf()
    } else {
        source.join("pathmnist.npz")
    };
    let file = fs::File::open(&path).map_err(|e| Error::IngestFile {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| Error::IngestFile {
        path: path.clone(),
        reason: format!("not a zip/npz archive: {e}"),
    })?;
    let (img_arr, img_shape) = read_npy_u8(&mut archive, &format!("{split}_images.npy"), &path)?;
    let (lbl_arr, lbl_shape) = read_npy_u8(&mut archive, &format!("{split}_labels.npy"), &path)?;
    let count = img_shape[0];
    let (h, w) = (img_shape[1], img_shape[2]);
    let ch = if img_shape.len() > 3 { img_shape[3] } else { 1 };
    if lbl_shape[0] != count {
        return Err(Error::Ingest(format!(
            "pathmnist {split}: {count} images vs {} labels",
            lbl_shape[0]
        )));
    }
    let mut images = Vec::with_capacity(count * TARGET_SIZE * TARGET_SIZE * ch);
    for i in 0..count {
        let src: Vec<f32> = img_arr[i * h * w * ch..(i + 1) * h * w * ch]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.extend(bilinear_resize(&src, h, w, ch, TARGET_SIZE, TARGET_SIZE));
    }
    let stride = lbl_arr.len() / count;
    let labels: Vec<u32> = (0..count).map(|i| lbl_arr[i * stride] as u32).collect();
    LabeledImageDataset::new("pathmnist", images, TARGET_SIZE, TARGET_SIZE, ch, labels, 9)
}

/// Minimal npy reader for C-order uint8 arrays inside an npz archive.
fn read_npy_u8(
    archive: &mut zip::ZipArchive<fs::File>,
    entry: &str,
    path: &Path,
) -> Result<(Vec<u8>, Vec<usize>)> {
    let mut file = archive.by_name(entry).map_err(|e| Error::IngestFile {
        path: path.to_path_buf(),
        reason: format!("missing entry {entry}: {e}"),
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let bad = |reason: String| Error::IngestFile {
        path: path.to_path_buf(),
        reason: format!("{entry}: {reason}"),
    };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("not an npy file".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = if major == 1 {
        (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10)
    } else {
        (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        )
    };
    let header = std::str::from_utf8(&bytes[header_start..header_start + header_len])
        .map_err(|e| bad(e.to_string()))?;
    if !header.contains("u1") && !header.contains("uint8") {
        return Err(bad(format!("expected uint8 dtype, header: {header}")));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran-order arrays unsupported".into()));
    }
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad(format!("cannot parse shape from header: {header}")))?;
    let shape: Vec<usize> = shape_str
        .split(',')
        .filter_map(|s| s.trim().parse::<usize>().ok())
        .collect();
    let total: usize = shape.iter().product();
    let data = bytes[header_start + header_len..].to_vec();
    if data.len() != total {
        return Err(bad(format!("expected {total} bytes, found {}", data.len())));
    }
    Ok((data, shape))
}

/// Bilinear resize of an HWC image with half-pixel centers, edges clamped.
pub fn bilinear_resize(
    src: &[f32],
    h: usize,
    w: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_h * out_w * ch);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for c in 0..ch {
                let at = |y: usize, x: usize| src[(y * w + x) * ch + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_constant_image_stays_constant() {
        let src = vec![0.4f32; 28 * 28];
        let out = bilinear_resize(&src, 28, 28, 1, 32, 32);
        assert_eq!(out.len(), 32 * 32);
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn bilinear_preserves_range() {
        let src: Vec<f32> = (0..28 * 28).map(|i| (i % 255) as f32 / 255.0).collect();
        let out = bilinear_resize(&src, 28, 28, 1, 32, 32);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_magic_checked() {
        let bytes = vec![0u8; 20];
        assert!(parse_idx_images(&bytes, Path::new("x")).is_err());
    }
}
