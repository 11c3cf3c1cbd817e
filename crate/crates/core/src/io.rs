//! `DPT1` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 0..4         | magic `DPT1`                     |
//! | 4            | dtype code, `0` = f32            |
//! | 5..9         | rank as u32, always 4            |
//! | 9..25        | four u32 dims                    |
//! | 25..         | f32 payload, row-major           |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_volume, Tensor4};

pub const TENSOR_MAGIC: &[u8; 4] = b"DPT1";
const DTYPE_F32: u8 = 0;
const RANK: u32 = 4;

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor4) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&[DTYPE_F32])?;
    out.write_all(&RANK.to_le_bytes())?;
    for d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dim {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn encode_tensor(t: &Tensor4) -> Vec<u8> {
    let mut buf = Vec::with_capacity(25 + 4 * t.len());
    write_tensor(&mut buf, t).expect("dims were validated on construction");
    buf
}

pub(crate) fn read_exact_or_truncated<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Decode(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(input, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Decode(format!("bad tensor magic {magic:?}")));
    }
    let mut dtype = [0u8; 1];
    read_exact_or_truncated(input, &mut dtype, "dtype")?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Decode(format!("unsupported dtype code {}", dtype[0])));
    }
    let rank = read_u32(input, "rank")?;
    if rank != RANK {
        return Err(Error::Decode(format!("rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(input, "dims")? as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Decode(format!("zero dimension in {dims:?}")));
    }
    let count = checked_volume(dims)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Decode(format!("dims {dims:?} overflow")))?;
    // Read in bounded chunks so a corrupt header cannot force a huge allocation.
    let mut data = Vec::new();
    let mut chunk = vec![0u8; 4 * 4096];
    let mut remaining = count;
    while remaining > 0 {
        let take = remaining.min(4096);
        let bytes = &mut chunk[..4 * take];
        read_exact_or_truncated(input, bytes, "payload")?;
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= take;
    }
    Tensor4::from_vec(dims, data)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor4> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Decode(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn tensor_write(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor4> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor4::from_vec([1, 2, 1, 1], vec![1.0, -0.0]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"DPT1");
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..9], &4u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
        assert_eq!(&b[29..33], &(-0.0f32).to_le_bytes());
        assert_eq!(b.len(), 33);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode_tensor(&[]), Err(Error::Decode(_))));
        let mut b = encode_tensor(&Tensor4::zeros([1, 1, 2, 2]));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Decode(_))));
        let b = encode_tensor(&Tensor4::zeros([1, 1, 2, 2]));
        assert!(matches!(decode_tensor(&b[..b.len() - 1]), Err(Error::Decode(_))));
        let mut huge = b[..9].to_vec();
        for _ in 0..4 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_tensor(&huge), Err(Error::Decode(_))));
        let mut rank3 = b.clone();
        rank3[5] = 3;
        assert!(matches!(decode_tensor(&rank3), Err(Error::Decode(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpt");
        let t = Tensor4::from_vec([2, 1, 1, 3], vec![0.5, -0.0, 0.0, f32::MIN_POSITIVE, 3e38, -1.25]).unwrap();
        tensor_write(&path, &t).unwrap();
        let back = tensor_read(&path).unwrap();
        let bits = |t: &Tensor4| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(bits(&back), bits(&t));

        std::fs::write(&path, b"").unwrap();
        assert!(tensor_read(&path).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in (1usize..4, 1usize..4, 1usize..5, 1usize..5),
            seed in proptest::collection::vec(any::<u32>(), 64),
        ) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed[i % seed.len()].wrapping_mul(i as u32 + 1)))
                .map(|v| if v.is_finite() { v } else { -0.0 })
                .collect();
            let t = Tensor4::from_vec(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
