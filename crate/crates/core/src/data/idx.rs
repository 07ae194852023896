use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unsigned-byte, rank-3 payload.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte, rank-1 payload.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn header(bytes: &[u8], magic: u32) -> Result<(Vec<u32>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated { expected: 4, actual: bytes.len() });
    }
    let observed = BigEndian::read_u32(&bytes[..4]);
    if observed != magic {
        return Err(Error::IdxMagic { observed, expected: magic });
    }
    let rank = (magic & 0xff) as usize;
    let head = 4 + 4 * rank;
    if bytes.len() < head {
        return Err(Error::IdxTruncated { expected: head, actual: bytes.len() });
    }
    let dims: Vec<u32> = (0..rank)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]))
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(head))
        .ok_or_else(|| Error::IdxOverflow { dims: dims.clone() })?;
    if bytes.len() < payload {
        return Err(Error::IdxTruncated { expected: payload, actual: bytes.len() });
    }
    Ok((dims, head))
}

/// Images from an in-memory IDX image file, as `[H, W]` tensors in `[0, 1]`.
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<Vec<Tensor<T>>> {
    let (dims, head) = header(bytes, IDX_IMAGES_MAGIC)?;
    let (n, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let scale = T::lit(1.0 / 255.0);
    Ok((0..n)
        .map(|k| {
            let start = head + k * h * w;
            let data = bytes[start..start + h * w]
                .iter()
                .map(|&b| T::lit(b as f64) * scale)
                .collect();
            Tensor::new(vec![h, w], data).expect("h*w bytes per image")
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (dims, head) = header(bytes, IDX_LABELS_MAGIC)?;
    Ok(bytes[head..head + dims[0] as usize].to_vec())
}

pub fn load_idx<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Tensor<T>>> {
    parse_idx(&std::fs::read(path)?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&std::fs::read(path)?)
}

/// Writes `[H, W]` images with values in `[0, 1]` as an IDX image file.
pub fn write_idx_images<T: Scalar>(path: impl AsRef<Path>, images: &[Tensor<T>]) -> Result<()> {
    let (h, w) = match images.first() {
        Some(img) => img.dims2("write_idx_images")?,
        None => (0, 0),
    };
    let mut buf = Vec::with_capacity(16 + images.len() * h * w);
    buf.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [images.len(), h, w] {
        buf.write_u32::<BigEndian>(d as u32)?;
    }
    for img in images {
        if img.shape() != [h, w] {
            return Err(crate::error::dim_err("write_idx_images", "images differ in size"));
        }
        buf.extend(img.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        // two 3x3 images written byte by byte
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3];
        b.extend((0u8..18).map(|i| i * 15));
        b
    }

    #[test]
    fn fixture_round_trip() {
        let imgs = parse_idx::<f64>(&fixture()).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[1][[2, 2]], 255.0 / 255.0);
        assert_eq!(imgs[0][[0, 1]], 15.0 / 255.0);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = fixture();
        b[3] = 1;
        assert!(matches!(parse_idx::<f64>(&b), Err(Error::IdxMagic { observed: 0x0801, .. })));
        let b = fixture();
        assert!(matches!(
            parse_idx::<f64>(&b[..20]),
            Err(Error::IdxTruncated { expected: 34, actual: 20 })
        ));
    }

    #[test]
    fn overflowing_dims() {
        let b = vec![0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255];
        let r = parse_idx::<f64>(&b);
        if usize::BITS < 96 {
            assert!(matches!(r, Err(Error::IdxOverflow { .. })));
        }
    }

    #[test]
    fn labels() {
        let b = vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 1, 9];
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 1, 9]);
    }
}
