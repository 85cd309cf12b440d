//! IDX-style binary image and label files.
//!
//! Images: magic 0x00000803, then count, height, width as big-endian u32,
//! then u8 pixels row-major. Labels: magic 0x00000801, then count, then u8
//! labels. Pixels load as f64 in [0, 1] (divided by 255).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads images as `[1, H, W]` tensors scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat {
            detail: format!("bad image magic 0x{magic:08x}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut pixels = vec![0u8; count * h * w];
    r.read_exact(&mut pixels).map_err(|_| Error::IdxFormat {
        detail: "truncated pixel data".into(),
    })?;
    (0..count)
        .map(|i| {
            let slice = &pixels[i * h * w..(i + 1) * h * w];
            Tensor::new(
                vec![1, h, w],
                slice.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_u32(&mut r)?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat {
            detail: format!("bad label magic 0x{magic:08x}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|_| Error::IdxFormat {
        detail: "truncated label data".into(),
    })?;
    Ok(labels.into_iter().map(usize::from).collect())
}

/// Writes u8 pixel buffers, one image of `h * w` bytes each.
pub fn write_images(path: &Path, h: usize, w: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    out.write_all(&(images.len() as u32).to_be_bytes())?;
    out.write_all(&(h as u32).to_be_bytes())?;
    out.write_all(&(w as u32).to_be_bytes())?;
    for img in images {
        if img.len() != h * w {
            return Err(Error::IdxFormat {
                detail: format!("image buffer of {} bytes, expected {}", img.len(), h * w),
            });
        }
        out.write_all(img)?;
    }
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&LABEL_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        let images: Vec<Vec<u8>> = (0..3)
            .map(|i| (0..6).map(|p| (i * 40 + p) as u8).collect())
            .collect();
        write_images(&path, 2, 3, &images).unwrap();
        let back = read_images(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].shape(), &[1, 2, 3]);
        assert_eq!(back[2].data()[0], 80.0 / 255.0);
    }

    #[test]
    fn label_round_trip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx");
        write_labels(&path, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec![3, 1, 4, 1, 5]);
        // An image file read as labels trips the magic check.
        let ipath = dir.path().join("imgs.idx");
        write_images(&ipath, 1, 1, &[vec![0]]).unwrap();
        assert!(matches!(
            read_labels(&ipath),
            Err(Error::IdxFormat { .. })
        ));
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut f = File::create(&path).unwrap();
        f.write_all(&IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&4u32.to_be_bytes()).unwrap();
        f.write_all(&4u32.to_be_bytes()).unwrap();
        f.write_all(&[0u8; 5]).unwrap(); // needs 32 bytes
        assert!(matches!(
            read_images(&path),
            Err(Error::IdxFormat { .. })
        ));
    }
}
