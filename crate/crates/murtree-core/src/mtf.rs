//! MTF1 tensor binary format, plus the multi-tensor checkpoint container.
//!
//! MTF1 layout (all integers little-endian):
//!   magic `4D 54 46 31` ("MTF1"), u32 rank r, r × u32 extents,
//!   then product-many f32 values. Round-trips are bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MTF1_MAGIC: [u8; 4] = *b"MTF1";
const MTFC_MAGIC: [u8; 4] = *b"MTFC";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&MTF1_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MTF1_MAGIC {
        return Err(Error::format("MTF1", format!("bad magic {magic:02X?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format("MTF1", format!("rank {rank} out of range 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    // Reproduce the on-disk bits exactly; finiteness is a property of
    // computed values, not of foreign payloads.
    Ok(Tensor::from_parts_unchecked(shape, data))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Checkpoint container: magic "MTFC", u32 version, u64 seed,
/// u32 completed-epoch count, u32 entry count, then per entry a
/// length-prefixed UTF-8 name followed by one MTF1 record.
pub struct Checkpoint {
    pub seed: u64,
    pub epochs_done: u32,
    pub entries: Vec<(String, Tensor)>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    w.write_all(&MTFC_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&ck.seed.to_le_bytes())?;
    w.write_all(&ck.epochs_done.to_le_bytes())?;
    w.write_all(&(ck.entries.len() as u32).to_le_bytes())?;
    for (name, t) in &ck.entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MTFC_MAGIC {
        return Err(Error::format("MTFC", format!("bad magic {magic:02X?}")));
    }
    let version = read_u32(r)?;
    if version != 1 {
        return Err(Error::format("MTFC", format!("unsupported version {version}")));
    }
    let mut seed_bytes = [0u8; 8];
    r.read_exact(&mut seed_bytes)?;
    let seed = u64::from_le_bytes(seed_bytes);
    let epochs_done = read_u32(r)?;
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("MTFC", "entry name is not UTF-8".to_string()))?;
        let t = read_tensor(r)?;
        entries.push((name, t));
    }
    Ok(Checkpoint {
        seed,
        epochs_done,
        entries,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtf1_round_trip_is_bitwise() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.25, 3.0e-7, 1.0e8, 0.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MTF1");
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn mtf1_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        // magic, rank=2, extents 2 and 1, then 2 f32 values
        assert_eq!(buf.len(), 4 + 4 + 8 + 8);
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            seed: 42,
            epochs_done: 3,
            entries: vec![
                ("a.w".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
                ("b.b".to_string(), Tensor::new(vec![1], vec![-7.5]).unwrap()),
            ],
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.epochs_done, 3);
        assert_eq!(back.entries.len(), 2);
        assert!(back.entries[0].1.bit_eq(&ck.entries[0].1));
        assert_eq!(back.entries[1].0, "b.b");
    }
}
