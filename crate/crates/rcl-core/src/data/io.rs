//! On-disk dataset layout: a directory holding `train.cmn` and `test.cmn`
//! in the CMN1 binary format plus a plain-text `meta.txt` sidecar.
//!
//! CMN1, little-endian: magic "CMN1", u32 count, u32 H=64, u32 W=64, u32 C=3;
//! then per sample: u8 digit_label, u8 bkgd_label, H*W*C pixel bytes
//! (row-major, channel-last).

use super::{ColorfulMnistSample, Dataset, DatasetMeta, IMG_SIZE};
use crate::{RclError, Result};
use ndarray::Array3;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CMN1";

pub fn write_split(path: &Path, split: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| RclError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| RclError::io(path, e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&(split.len() as u32).to_le_bytes()).map_err(werr)?;
    for dim in [IMG_SIZE as u32, IMG_SIZE as u32, 3u32] {
        w.write_all(&dim.to_le_bytes()).map_err(werr)?;
    }
    let mut pixel_buf = vec![0u8; IMG_SIZE * IMG_SIZE * 3];
    for s in &split.samples {
        w.write_all(&[s.digit_label, s.bkgd_label]).map_err(werr)?;
        for i in 0..IMG_SIZE {
            for j in 0..IMG_SIZE {
                for c in 0..3 {
                    pixel_buf[(i * IMG_SIZE + j) * 3 + c] =
                        (s.image[(c, i, j)] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        w.write_all(&pixel_buf).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

pub fn read_split(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = BufReader::new(file);
    let rerr = |e| RclError::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rerr)?;
    if &magic != MAGIC {
        return Err(RclError::Format(format!(
            "bad dataset magic {:?}, expected \"CMN1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let count = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    if (h, w, c) != (IMG_SIZE, IMG_SIZE, 3) {
        return Err(RclError::Format(format!(
            "unsupported dataset dims {h}x{w}x{c}, expected 64x64x3"
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut labels = [0u8; 2];
    let mut pixels = vec![0u8; h * w * c];
    for _ in 0..count {
        r.read_exact(&mut labels).map_err(rerr)?;
        r.read_exact(&mut pixels).map_err(rerr)?;
        let image = Array3::from_shape_fn((3, IMG_SIZE, IMG_SIZE), |(cc, i, j)| {
            pixels[(i * IMG_SIZE + j) * 3 + cc] as f32 / 255.0
        });
        samples.push(ColorfulMnistSample {
            image,
            digit_label: labels[0],
            bkgd_label: labels[1],
        });
    }
    Ok(Dataset { samples })
}

fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let text = format!(
        "count={}\nseed={}\nmean_r={:.8}\nmean_g={:.8}\nmean_b={:.8}\n",
        meta.count, meta.seed, meta.mean_pixel[0], meta.mean_pixel[1], meta.mean_pixel[2]
    );
    std::fs::write(path, text).map_err(|e| RclError::io(path, e))
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
    let mut count = None;
    let mut seed = None;
    let mut mean = [None::<f32>; 3];
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            RclError::Format(format!("meta line without '=': `{line}`"))
        })?;
        let parse_err = |e| RclError::Format(format!("meta key `{key}`: {e}"));
        match key {
            "count" => count = Some(value.parse::<u32>().map_err(|e| parse_err(e.to_string()))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| parse_err(e.to_string()))?),
            "mean_r" => mean[0] = Some(value.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?),
            "mean_g" => mean[1] = Some(value.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?),
            "mean_b" => mean[2] = Some(value.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?),
            other => {
                return Err(RclError::Format(format!("unknown meta key `{other}`")));
            }
        }
    }
    match (count, seed, mean) {
        (Some(count), Some(seed), [Some(r), Some(g), Some(b)]) => Ok(DatasetMeta {
            count,
            seed,
            mean_pixel: [r, g, b],
        }),
        _ => Err(RclError::Format("meta file missing required keys".to_string())),
    }
}

/// Writes both splits and metadata into `dir`.
pub fn write_dataset(dir: &Path, train: &Dataset, test: &Dataset, meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RclError::io(dir, e))?;
    write_split(&dir.join("train.cmn"), train)?;
    write_split(&dir.join("test.cmn"), test)?;
    write_meta(&dir.join("meta.txt"), meta)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Dataset, DatasetMeta)> {
    if !dir.exists() {
        return Err(RclError::NotFound(format!(
            "dataset directory {}",
            dir.display()
        )));
    }
    let train = read_split(&dir.join("train.cmn"))?;
    let test = read_split(&dir.join("test.cmn"))?;
    let meta = read_meta(&dir.join("meta.txt"))?;
    Ok((train, test, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, ProceduralBackgrounds, ProceduralDigits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_identity_for_synthesized_data() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test, meta) =
            synthesize_dataset(3, 2, 11, &ProceduralBackgrounds::new(), &ProceduralDigits)
                .unwrap();
        write_dataset(dir.path(), &train, &test, &meta).unwrap();
        let (train2, test2, meta2) = read_dataset(dir.path()).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert_eq!(meta.count, meta2.count);
        assert_eq!(meta.seed, meta2.seed);
        for c in 0..3 {
            assert!((meta.mean_pixel[c] - meta2.mean_pixel[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cmn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_split(&path), Err(RclError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _, _) =
            synthesize_dataset(4, 1, 2, &ProceduralBackgrounds::new(), &ProceduralDigits)
                .unwrap();
        let path = dir.path().join("trunc.cmn");
        write_split(&path, &train).unwrap();
        // Declare 5 samples but only provide 4 of payload.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&5u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_split(&path), Err(RclError::Io { .. })));
    }

    #[test]
    fn quantization_error_is_bounded() {
        // Arbitrary float images survive one write/read within half a step
        // of the u8 grid.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Dataset {
            samples: vec![crate::data::ColorfulMnistSample {
                image: ndarray::Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0f32)),
                digit_label: 1,
                bkgd_label: 2,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.cmn");
        write_split(&path, &raw).unwrap();
        let back = read_split(&path).unwrap();
        let max_err = raw.samples[0]
            .image
            .iter()
            .zip(back.samples[0].image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-7, "max quantization error {max_err}");
        // A second round trip is exactly the identity.
        let path2 = dir.path().join("q2.cmn");
        write_split(&path2, &back).unwrap();
        assert_eq!(back, read_split(&path2).unwrap());
    }

    #[test]
    fn missing_directory_is_not_found() {
        assert!(matches!(
            read_dataset(Path::new("/definitely/not/here")),
            Err(RclError::NotFound(_))
        ));
    }
}
