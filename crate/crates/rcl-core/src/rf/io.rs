//! RFS1 binary sequence format, little-endian: magic "RFS1", u32 T, u32 H_h,
//! u32 W_h, u32 H_v, u32 W_v, f32 scale; then T x (horizontal f32 payload,
//! vertical f32 payload); then T x (f32 gt_x, f32 gt_y).

use super::{RfFrame, RfSequence};
use crate::{RclError, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"RFS1";

pub fn write_rf_sequence(path: &Path, seq: &RfSequence) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| RclError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let werr = |e| RclError::io(path, e);
    let ((hh, wh), (hv, wv)) = seq.grid();
    w.write_all(MAGIC).map_err(werr)?;
    for v in [seq.len() as u32, hh as u32, wh as u32, hv as u32, wv as u32] {
        w.write_all(&v.to_le_bytes()).map_err(werr)?;
    }
    w.write_all(&seq.scale.to_le_bytes()).map_err(werr)?;
    for f in &seq.frames {
        for plane in [&f.horizontal, &f.vertical] {
            for &v in plane.iter() {
                w.write_all(&v.to_le_bytes()).map_err(werr)?;
            }
        }
    }
    for &(x, y) in &seq.ground_truth {
        w.write_all(&x.to_le_bytes()).map_err(werr)?;
        w.write_all(&y.to_le_bytes()).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn read_rf_sequence(path: &Path) -> Result<RfSequence> {
    let file = std::fs::File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| RclError::io(path, e))?;
    if &magic != MAGIC {
        return Err(RclError::Format("bad RF sequence magic".to_string()));
    }
    let mut b4 = [0u8; 4];
    let mut read_u32 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<u32> {
        r.read_exact(&mut b4).map_err(|e| RclError::io(path, e))?;
        Ok(u32::from_le_bytes(b4))
    };
    let t = read_u32(&mut r)? as usize;
    let hh = read_u32(&mut r)? as usize;
    let wh = read_u32(&mut r)? as usize;
    let hv = read_u32(&mut r)? as usize;
    let wv = read_u32(&mut r)? as usize;
    let mut sb = [0u8; 4];
    r.read_exact(&mut sb).map_err(|e| RclError::io(path, e))?;
    let scale = f32::from_le_bytes(sb);

    let read_plane = |r: &mut std::io::BufReader<std::fs::File>,
                          h: usize,
                          w: usize|
     -> Result<Array2<f32>> {
        let mut buf = vec![0u8; h * w * 4];
        r.read_exact(&mut buf).map_err(|e| RclError::io(path, e))?;
        Ok(Array2::from_shape_vec(
            (h, w),
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
        .expect("plane shape"))
    };
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let horizontal = read_plane(&mut r, hh, wh)?;
        let vertical = read_plane(&mut r, hv, wv)?;
        frames.push(RfFrame {
            horizontal,
            vertical,
        });
    }
    let mut ground_truth = Vec::with_capacity(t);
    for _ in 0..t {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|e| RclError::io(path, e))?;
        ground_truth.push((
            f32::from_le_bytes([b8[0], b8[1], b8[2], b8[3]]),
            f32::from_le_bytes([b8[4], b8[5], b8[6], b8[7]]),
        ));
    }
    Ok(RfSequence {
        frames,
        ground_truth,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rf::{generate_rf_sequence, RfGenParams};

    #[test]
    fn rf_sequence_round_trip() {
        let params = RfGenParams {
            frames: 6,
            noise_sigma: 0.01,
            ..RfGenParams::default()
        };
        let seq = generate_rf_sequence(&params, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rfs");
        write_rf_sequence(&path, &seq).unwrap();
        let back = read_rf_sequence(&path).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rfs");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_rf_sequence(&path),
            Err(RclError::Format(_))
        ));
        let params = RfGenParams {
            frames: 3,
            ..RfGenParams::default()
        };
        let seq = generate_rf_sequence(&params, 1).unwrap();
        let good = dir.path().join("good.rfs");
        write_rf_sequence(&good, &seq).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&good, &bytes).unwrap();
        assert!(matches!(
            read_rf_sequence(&good),
            Err(RclError::Io { .. })
        ));
    }
}
