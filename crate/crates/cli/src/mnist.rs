//! IDX file parsing for the optional MNIST demo.
//!
//! The IDX header is big-endian: a magic whose third byte encodes the
//! element type (0x08 = unsigned byte) and whose fourth byte is the rank,
//! followed by one u32 extent per dimension, then the raw data.

use anyhow::{bail, Context, Result};
use lopt_core::ndarray::NdArray;
use std::path::Path;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > bytes.len() {
        bail!(
            "truncated IDX header: need 4 bytes at offset {offset}, file has {}",
            bytes.len()
        );
    }
    Ok(u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap()))
}

/// Parse an IDX file of unsigned bytes, scaling values to [0, 1].
pub fn load_idx(path: &Path) -> Result<NdArray> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic >> 16 != 0 {
        bail!("bad IDX magic {magic:#010x} at offset 0: first two bytes must be zero");
    }
    let dtype = (magic >> 8) & 0xff;
    if dtype != 0x08 {
        bail!("unsupported IDX element type {dtype:#04x} at offset 2 (only unsigned byte)");
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 || rank > 3 {
        bail!("unsupported IDX rank {rank} at offset 3");
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        shape.push(read_u32_be(&bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * rank;
    let expected: usize = shape.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        bail!(
            "IDX data length mismatch at offset {header}: expected {expected} bytes, found {actual}"
        );
    }
    let data: Vec<f64> = bytes[header..].iter().map(|&b| b as f64 / 255.0).collect();
    NdArray::from_vec(shape, data).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Images flattened to rows and labels in [0, 9].
pub fn load_pairs(images: &Path, labels: &Path) -> Result<(NdArray, NdArray)> {
    let x = load_idx(images)?;
    if x.rank() != 3 {
        bail!("image file has rank {}, expected 3", x.rank());
    }
    let n = x.shape()[0];
    let pixels = x.shape()[1] * x.shape()[2];
    let x = x.reshape(&[n, pixels]).map_err(|e| anyhow::anyhow!("{e}"))?;
    let y = load_idx(labels)?;
    if y.rank() != 1 {
        bail!("label file has rank {}, expected 1", y.rank());
    }
    if y.shape()[0] != n {
        bail!("{} labels for {} images", y.shape()[0], n);
    }
    // labels come scaled by 1/255; restore integer class values
    let y = y.map(|v| (v * 255.0).round());
    if y.data().iter().any(|&v| !(0.0..=9.0).contains(&v)) {
        bail!("label outside [0, 9]");
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(path: &Path, rank_bytes: &[u8], dims: &[u32], data: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(rank_bytes).unwrap();
        for d in dims {
            f.write_all(&d.to_be_bytes()).unwrap();
        }
        f.write_all(data).unwrap();
    }

    #[test]
    fn parses_images_and_labels() {
        let dir = std::env::temp_dir().join(format!("idx_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("images");
        let lab = dir.join("labels");
        // 2 images of 2x3 pixels
        write_idx(
            &img,
            &[0, 0, 0x08, 3],
            &[2, 2, 3],
            &[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0],
        );
        write_idx(&lab, &[0, 0, 0x08, 1], &[2], &[7, 3]);
        let (x, y) = load_pairs(&img, &lab).unwrap();
        assert_eq!(x.shape(), &[2, 6]);
        assert_eq!(x.data()[0], 0.0);
        assert_eq!(x.data()[5], 1.0);
        assert_eq!(y.data(), &[7.0, 3.0]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = std::env::temp_dir().join(format!("idx_trunc_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("truncated");
        write_idx(&img, &[0, 0, 0x08, 2], &[4, 4], &[1, 2, 3]);
        let err = load_idx(&img).unwrap_err().to_string();
        assert!(err.contains("expected 16 bytes") && err.contains("found 3"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let dir = std::env::temp_dir().join(format!("idx_magic_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("bad");
        write_idx(&img, &[9, 9, 0x08, 1], &[1], &[0]);
        let err = load_idx(&img).unwrap_err().to_string();
        assert!(err.contains("magic") && err.contains("offset 0"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
