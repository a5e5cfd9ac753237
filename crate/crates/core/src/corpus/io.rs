//! Binary dataset format.
//!
//! ```text
//! "CMO1" | C N W H Ch (u32 LE) | N x (label u32 LE, W*H*Ch bytes)
//! ```
//!
//! Pixels are quantized to 8 bits; images already on the 8-bit grid
//! round-trip exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, Image, ImageShape, LabeledImage};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMO1";
const HEADER_LEN: usize = 4 + 5 * 4;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn u32_field(value: usize, name: &str) -> Result<[u8; 4]> {
    u32::try_from(value)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{name} = {value} does not fit in u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let shape = ds.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 + shape.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_field(ds.num_classes(), "classes")?);
    out.extend_from_slice(&u32_field(ds.len(), "images")?);
    out.extend_from_slice(&u32_field(shape.width, "width")?);
    out.extend_from_slice(&u32_field(shape.height, "height")?);
    out.extend_from_slice(&u32_field(shape.channels, "channels")?);
    for item in ds.images() {
        out.extend_from_slice(&u32_field(item.label, "label")?);
        out.extend(item.image.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let classes = read_u32(bytes, 4);
    let count = read_u32(bytes, 8);
    let shape = ImageShape::new(read_u32(bytes, 12), read_u32(bytes, 16), read_u32(bytes, 20))
        .map_err(|e| Error::Format(e.to_string()))?;
    let record = 4 + shape.len();
    let expected = count
        .checked_mul(record)
        .and_then(|body| body.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("record table size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {count} images of {shape}, found {}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * record;
        let label = read_u32(bytes, at);
        if label >= classes {
            return Err(Error::Format(format!("image {i} has label {label} >= {classes}")));
        }
        let data = bytes[at + 4..at + record].iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(LabeledImage {
            image: Image::from_raw(shape, data),
            label,
        });
    }
    Dataset::new(shape, classes, images).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Hex SHA-256 of the encoded datasets, in order.
pub fn content_hash(datasets: &[&Dataset]) -> Result<String> {
    let mut hasher = Sha256::new();
    for ds in datasets {
        hasher.update(encode_dataset(ds)?);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(pixels: Vec<u8>, labels: Vec<usize>, shape: ImageShape) -> Dataset {
        let images = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledImage {
                image: Image::new(
                    shape,
                    pixels[i * shape.len()..(i + 1) * shape.len()]
                        .iter()
                        .map(|&b| f64::from(b) / 255.0)
                        .collect(),
                )
                .unwrap(),
                label,
            })
            .collect();
        Dataset::new(shape, 2, images).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(w in 1usize..5, h in 1usize..5, c in 1usize..4, extra in prop::collection::vec(0usize..2, 0..6), seed in any::<u64>()) {
            let shape = ImageShape::new(w, h, c).unwrap();
            let mut labels = vec![0, 1];
            labels.extend(extra);
            let pixels: Vec<u8> = (0..labels.len() * shape.len())
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8)
                .collect();
            let ds = dataset(pixels, labels, shape);
            let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let shape = ImageShape::new(2, 2, 1).unwrap();
        let ds = dataset(vec![10; 8], vec![0, 1], shape);
        let bytes = encode_dataset(&ds).unwrap();
        for cut in [0, 3, HEADER_LEN, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let shape = ImageShape::new(1, 1, 1).unwrap();
        let mut bytes = encode_dataset(&dataset(vec![1, 2], vec![0, 1], shape)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout() {
        let shape = ImageShape::new(3, 2, 1).unwrap();
        let ds = dataset(vec![255; 12], vec![1, 0], shape);
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"CMO1");
        assert_eq!(read_u32(&bytes, 4), 2);
        assert_eq!(read_u32(&bytes, 8), 2);
        assert_eq!(read_u32(&bytes, 12), 3);
        assert_eq!(read_u32(&bytes, 16), 2);
        assert_eq!(read_u32(&bytes, 20), 1);
        assert_eq!(read_u32(&bytes, 24), 1);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (4 + 6));
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cmo");
        let shape = ImageShape::new(2, 1, 3).unwrap();
        let ds = dataset((0..12).collect(), vec![0, 1], shape);
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(content_hash(&[&ds]).unwrap(), content_hash(&[&back]).unwrap());
        assert_eq!(content_hash(&[&ds]).unwrap().len(), 64);
    }
}
