//! IDX image and label files, as used by the MNIST distribution.

use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated {
            needed: at as u64 + 4,
            got: bytes.len() as u64,
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, dims: &[u32]) -> Result<&'a [u8], DataError> {
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&c| c <= isize::MAX as u64)
        .ok_or(DataError::Overflow)?;
    let needed = (header as u64).checked_add(count).ok_or(DataError::Overflow)?;
    if (bytes.len() as u64) < needed {
        return Err(DataError::Truncated {
            needed,
            got: bytes.len() as u64,
        });
    }
    Ok(&bytes[header..needed as usize])
}

/// Raw pixel values `[count, rows, cols]` in `[0, 255]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor, DataError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?];
    let pixels = body(bytes, 16, &dims)?;
    if dims.contains(&0) {
        return Err(DataError::Invalid(format!("zero dimension in {dims:?}")));
    }
    let shape = dims.iter().map(|&d| d as usize).collect();
    Tensor::new(shape, pixels.iter().map(|&p| p as f64).collect()).map_err(|e| DataError::Invalid(e.to_string()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)?;
    Ok(body(bytes, 8, &[n])?.to_vec())
}

/// `v ↦ v/127.5 − 1` for raw values in `[0, 255]`.
pub fn normalize(raw: &Tensor) -> Result<Tensor, DataError> {
    let mut out = raw.clone();
    for (index, v) in out.data_mut().iter_mut().enumerate() {
        if !(0.0..=255.0).contains(v) {
            return Err(DataError::OutOfRange {
                index,
                value: *v,
                range: "[0, 255]",
            });
        }
        *v = *v / 127.5 - 1.0;
    }
    Ok(out)
}

/// Inverse of [`normalize`] for values in `[-1, 1]`.
pub fn denormalize(images: &Tensor) -> Result<Tensor, DataError> {
    let mut out = images.clone();
    for (index, v) in out.data_mut().iter_mut().enumerate() {
        if !(-1.0..=1.0).contains(v) {
            return Err(DataError::OutOfRange {
                index,
                value: *v,
                range: "[-1, 1]",
            });
        }
        *v = (*v + 1.0) * 127.5;
    }
    Ok(out)
}

/// Nearest 8-bit pixel for a value in `[-1, 1]`.
pub fn unit_to_pixel(v: f64) -> Option<u8> {
    if !(-1.0..=1.0).contains(&v) {
        return None;
    }
    Some(((v + 1.0) * 127.5).round() as u8)
}

/// Normalized `[n, 1, rows, cols]` images from an IDX file.
pub fn load_idx_images(path: &Path) -> Result<Tensor, DataError> {
    let raw = parse_idx(&std::fs::read(path)?)?;
    let s = raw.shape().to_vec();
    normalize(&raw.reshape(vec![s[0], 1, s[1], s[2]]).map_err(|e| DataError::Invalid(e.to_string()))?)
}

/// IDX image file for `[n, 1, rows, cols]` or `[n, rows, cols]` data in `[-1, 1]`.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>, DataError> {
    let dims = match images.shape() {
        [n, 1, h, w] | [n, h, w] => [*n, *h, *w],
        s => return Err(DataError::Invalid(format!("expected [n, 1, h, w], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(16 + images.numel());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| DataError::Overflow)?.to_be_bytes());
    }
    for (index, &v) in images.data().iter().enumerate() {
        out.push(unit_to_pixel(v).ok_or(DataError::OutOfRange {
            index,
            value: v,
            range: "[-1, 1]",
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn write_raw(t: &Tensor) -> Vec<u8> {
        let s = t.shape();
        let mut v = header(IMAGE_MAGIC, &[s[0] as u32, s[1] as u32, s[2] as u32]);
        v.extend(t.data().iter().map(|&x| x as u8));
        v
    }

    #[test]
    fn handcrafted_blob() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 2, 2]);
        bytes.extend_from_slice(&[0, 1, 2, 3, 250, 251, 252, 255]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 250.0, 251.0, 252.0, 255.0]);
    }

    #[test]
    fn asymmetric_dims_are_big_endian() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 3, 2]);
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2]);
        assert_eq!(t.data()[2], 3.0);
    }

    #[test]
    fn parses_labels() {
        let mut bytes = header(LABEL_MAGIC, &[3]);
        bytes.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn distinct_errors() {
        let mut wrong = header(LABEL_MAGIC, &[1, 1, 1]);
        wrong.push(0);
        assert!(matches!(parse_idx(&wrong), Err(DataError::BadMagic { .. })));
        assert!(matches!(parse_idx(&IMAGE_MAGIC.to_be_bytes()[..3]), Err(DataError::Truncated { .. })));
        assert!(matches!(parse_idx(&header(IMAGE_MAGIC, &[2])), Err(DataError::Truncated { .. })));
        assert!(matches!(
            parse_idx(&header(IMAGE_MAGIC, &[2, 2, 2])),
            Err(DataError::Truncated { needed: 24, got: 16 })
        ));
        let huge = header(IMAGE_MAGIC, &[u32::MAX, u32::MAX, u32::MAX]);
        assert!(matches!(parse_idx(&huge), Err(DataError::Overflow)));
        assert!(matches!(parse_idx_labels(&header(IMAGE_MAGIC, &[1])), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn normalize_endpoints() {
        let raw = Tensor::vector(vec![0.0, 255.0, 127.5]);
        assert_eq!(normalize(&raw).unwrap().data(), &[-1.0, 1.0, 0.0]);
        assert!(matches!(
            normalize(&Tensor::vector(vec![256.0])),
            Err(DataError::OutOfRange { index: 0, .. })
        ));
        assert!(normalize(&Tensor::vector(vec![-0.5])).is_err());
        assert!(denormalize(&Tensor::vector(vec![1.5])).is_err());
    }

    #[test]
    fn normalize_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Tensor::vector((0..500).map(|_| rng.random_range(0.0..=255.0)).collect());
        let back = denormalize(&normalize(&raw).unwrap()).unwrap();
        for (a, b) in raw.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn writer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let shape = vec![rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6)];
            let n = shape.iter().product();
            let t = Tensor::new(shape, (0..n).map(|_| rng.random_range(0..=255u8) as f64).collect()).unwrap();
            assert!(parse_idx(&write_raw(&t)).unwrap().bitwise_eq(&t));
        }
    }

    #[test]
    fn normalized_file_round_trip() {
        let raw = Tensor::new(vec![2, 2, 2], vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 255.0]).unwrap();
        let unit = normalize(&raw).unwrap();
        assert!(parse_idx(&encode_idx_images(&unit).unwrap()).unwrap().bitwise_eq(&raw));
    }
}
