//! DVGT tensor container.
//!
//! ```text
//! "DVGT" | version u8 = 0x01 | dtype u8 | ndim u8 | ndim × u32 LE extents | payload LE
//! ```
//! dtype `0x01` is f32; `0x02` (f64) is accepted for checking-mode dumps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DVGT";
pub const VERSION: u8 = 0x01;

fn fmt_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Dimension(format!("{} dimensions exceed the DVGT limit", shape.len())));
    }
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 4 {
        return fmt_err(bytes.len(), format!("truncated header: {} bytes, need at least 7", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return fmt_err(0, format!("bad magic {:?}, expected \"DVGT\"", &bytes[..4]));
    }
    if bytes.len() < 7 {
        return fmt_err(bytes.len(), format!("truncated header: {} bytes, need at least 7", bytes.len()));
    }
    if bytes[4] != VERSION {
        return fmt_err(4, format!("unsupported version 0x{:02x}", bytes[4]));
    }
    if bytes[5] != T::DTYPE {
        return fmt_err(5, format!("dtype 0x{:02x} where 0x{:02x} was requested", bytes[5], T::DTYPE));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return fmt_err(6, "zero-dimensional tensors are stored with shape [1]");
    }
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return fmt_err(bytes.len(), format!("truncated extents: expected {header} header bytes, found {}", bytes.len()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let o = 7 + 4 * i;
        let d = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        if d == 0 {
            return fmt_err(o, "zero extent");
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let expected = n * T::BYTES;
    let actual = bytes.len() - header;
    if actual != expected {
        return fmt_err(
            header,
            format!("payload of shape {shape:?} needs {expected} bytes, found {actual}"),
        );
    }
    let data = bytes[header..].chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_file_is_fifteen_bytes() {
        let bytes = encode(&Tensor::scalar(1.5f32)).unwrap();
        assert_eq!(bytes.len(), 15);
        assert_eq!(&bytes[..7], &[b'D', b'V', b'G', b'T', 0x01, 0x01, 0x01]);
    }

    #[test]
    fn truncated_payload_names_the_byte_counts() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = decode::<f32>(&bytes).unwrap_err();
        match err {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 15);
                assert!(msg.contains("24") && msg.contains("19"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&Tensor::scalar(0.0f32)).unwrap();
        bytes[4] = 0x02;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode::<f32>(b"DV"), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f32> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }
    }
}
