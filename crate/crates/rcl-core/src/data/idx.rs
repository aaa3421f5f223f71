//! IDX container reader for MNIST-style image/label files.

use crate::{RclError, Result};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| RclError::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX unsigned-byte 3-D tensor file (images).
pub fn read_idx_images(path: &Path) -> Result<Vec<Array2<f32>>> {
    let file = File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(RclError::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let rows = read_u32_be(&mut r, path)? as usize;
    let cols = read_u32_be(&mut r, path)? as usize;
    let mut data = vec![0u8; count * rows * cols];
    r.read_exact(&mut data)
        .map_err(|e| RclError::io(path, e))?;
    Ok(data
        .chunks_exact(rows * cols)
        .map(|img| {
            Array2::from_shape_vec(
                (rows, cols),
                img.iter().map(|&b| b as f32 / 255.0).collect(),
            )
            .expect("image shape")
        })
        .collect())
}

/// Reads an IDX unsigned-byte 1-D tensor file (labels).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_u32_be(&mut r, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(RclError::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut r, path)? as usize;
    let mut data = vec![0u8; count];
    r.read_exact(&mut data)
        .map_err(|e| RclError::io(path, e))?;
    Ok(data)
}

/// Loads a paired MNIST images/labels file set, pixels scaled to `[0,1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Vec<(Array2<f32>, u8)>> {
    let imgs = read_idx_images(images)?;
    let lbls = read_idx_labels(labels)?;
    if imgs.len() != lbls.len() {
        return Err(RclError::Format(format!(
            "image count {} does not match label count {}",
            imgs.len(),
            lbls.len()
        )));
    }
    Ok(imgs.into_iter().zip(lbls).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    /// Test fixture writer; the production code only ever reads IDX.
    pub fn write_idx_fixture(
        dir: &Path,
        images: &[[u8; 4]],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let img_path = dir.join("imgs.idx3");
        let lbl_path = dir.join("lbls.idx1");
        let mut f = File::create(&img_path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(images.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in images {
            f.write_all(img).unwrap();
        }
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<[u8; 4]> = (0..10u8).map(|i| [i, 2 * i, 255 - i, 128]).collect();
        let labels: Vec<u8> = (0..10).collect();
        let (ip, lp) = write_idx_fixture(dir.path(), &images, &labels);
        let pairs = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(pairs.len(), 10);
        for (i, (img, lbl)) in pairs.iter().enumerate() {
            assert_eq!(*lbl, labels[i]);
            let expect: Vec<f32> = images[i].iter().map(|&b| b as f32 / 255.0).collect();
            assert_eq!(img.iter().copied().collect::<Vec<_>>(), expect);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_fixture(dir.path(), &[[0, 0, 0, 0]], &[0]);
        // Labels file handed to the image reader: wrong magic.
        assert!(matches!(
            read_idx_images(&lp),
            Err(RclError::Format(_))
        ));
        assert!(matches!(
            read_idx_labels(&ip),
            Err(RclError::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx3");
        let mut f = File::create(&path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&5u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[1u8; 7]).unwrap(); // 5*2*2 = 20 bytes expected
        assert!(matches!(read_idx_images(&path), Err(RclError::Io { .. })));
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_idx_fixture(dir.path(), &[[0; 4], [1; 4]], &[0, 1]);
        let lbl_path = dir.path().join("short_lbls.idx1");
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&1u32.to_be_bytes()).unwrap();
        f.write_all(&[3u8]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lbl_path),
            Err(RclError::Format(_))
        ));
    }
}
