//! `AVTK` binary tensor files.
//!
//! Layout (little-endian throughout):
//!
//! | bytes        | content                     |
//! |--------------|-----------------------------|
//! | 4            | magic `AVTK`                |
//! | 1            | version (`1`)               |
//! | 1            | rank                        |
//! | 4 × rank     | dims, `u32`                 |
//! | 4 × numel    | payload, `f32`, row-major   |

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVTK";
pub const VERSION: u8 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let mut header = [0u8; 6];
    cursor
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header[4])));
    }
    let rank = header[5] as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        cursor
            .read_exact(&mut d)
            .map_err(|_| Error::Format("truncated dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    if cursor.len() != 4 * numel {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            cursor.len(),
            4 * numel
        )));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"AVTK");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let mut v = encode(&t);
        v[4] = 9;
        assert!(decode(&v).is_err());
    }

    #[test]
    fn thousand_random_round_trips_are_bit_exact() {
        let mut rng = Rng::new(2024);
        for _ in 0..1000 {
            let rank = 1 + rng.below(4);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
            let t: Tensor = rng.normal_tensor(&shape, 1e3);
            let back = decode(&encode(&t)).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.avtk");
        let t = Tensor::new(vec![2, 2], vec![0.5f32, f32::MIN_POSITIVE, -0.0, 7.25]).unwrap();
        write(&p, &t).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(encode(&back), encode(&t));
    }
}
