//! Raw tensor files for perturbations and bounds.
//!
//! Layout (little-endian): `"UAPP" | u32 version=1 | u32 c | u32 h | u32 w`
//! followed by `c·h·w` f32 values in C×H×W order, in the normalized domain.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, Perturbation, PerturbationBounds};

const MAGIC: &[u8; 4] = b"UAPP";
const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn tensor_to_bytes<T: Scalar>(shape: ImageShape, values: &[T]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, shape.c as u32, shape.h as u32, shape.w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    buf
}

pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ImageShape, Vec<T>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Parse { offset: bytes.len() as u64, message: "truncated header".into() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad magic, expected UAPP".into() });
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if field(0) != VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {}", field(0)) });
    }
    let shape = ImageShape::new(field(1) as usize, field(2) as usize, field(3) as usize);
    let expected = HEADER_LEN + shape.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected) as u64,
            message: format!("{shape} tensor needs {expected} bytes, file has {}", bytes.len()),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok((shape, values))
}

fn write(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read<T: Scalar>(path: &Path) -> Result<(ImageShape, Vec<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

pub fn save_perturbation<T: Scalar>(delta: &Perturbation<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), tensor_to_bytes(delta.shape(), delta.genes()))
}

pub fn load_perturbation<T: Scalar>(path: impl AsRef<Path>) -> Result<Perturbation<T>> {
    let (shape, values) = read(path.as_ref())?;
    Perturbation::from_genes(shape, values)
}

/// Only the upper bound is stored; bounds are symmetric.
pub fn save_bounds<T: Scalar>(bounds: &PerturbationBounds<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), tensor_to_bytes(bounds.shape(), bounds.upper()))
}

pub fn load_bounds<T: Scalar>(path: impl AsRef<Path>) -> Result<PerturbationBounds<T>> {
    let (shape, values) = read(path.as_ref())?;
    PerturbationBounds::symmetric(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let shape = ImageShape::rgb(2, 3);
        let delta = Perturbation::from_genes(shape, (0..18).map(|i| i as f32 * 0.25 - 2.0).collect()).unwrap();
        let bytes = tensor_to_bytes(delta.shape(), delta.genes());
        assert_eq!(bytes.len(), 20 + 18 * 4);
        assert_eq!(&bytes[..4], b"UAPP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -2.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_perturbation(&delta, &path).unwrap();
        assert_eq!(load_perturbation::<f32>(&path).unwrap(), delta);
        let widened: Perturbation<f64> = load_perturbation(&path).unwrap();
        assert_eq!(widened.genes()[1], -1.75);
    }

    #[test]
    fn rejects_malformed_files() {
        let shape = ImageShape::rgb(1, 2);
        let good = tensor_to_bytes::<f32>(shape, &[0.0; 6]);
        assert!(matches!(tensor_from_bytes::<f32>(&good[..10]), Err(Error::Parse { .. })));
        assert!(matches!(tensor_from_bytes::<f32>(&good[..good.len() - 1]), Err(Error::Parse { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(tensor_from_bytes::<f32>(&bad), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn bounds_round_trip() {
        let shape = ImageShape::rgb(1, 1);
        let bounds = PerturbationBounds::symmetric(shape, vec![0.1f64, 0.2, 0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        save_bounds(&bounds, &path).unwrap();
        let back: PerturbationBounds<f64> = load_bounds(&path).unwrap();
        assert_eq!(back.upper(), &[0.1f32 as f64, 0.2f32 as f64, 0.5]);
    }
}
