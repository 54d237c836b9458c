//! "VSCK" checkpoint files.
//!
//! Layout (little-endian): magic `VSCK`, format version `u32`, record count
//! `u64`, then per record: name length `u32`, UTF-8 name, rank `u32`, extents
//! as `u64`, elements as `f32`. The footer holds the config hash `u64`, the
//! RNG seed `u64` and the optimizer step `u64`.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor<f32>)>,
    pub config_hash: u64,
    pub rng_seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ck.records.len() as u64).to_le_bytes())?;
    for (name, t) in &ck.records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.write_all(&ck.config_hash.to_le_bytes())?;
    w.write_all(&ck.rng_seed.to_le_bytes())?;
    w.write_all(&ck.step.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    let config_hash = read_u64(&mut r)?;
    let rng_seed = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    Ok(Checkpoint {
        records,
        config_hash,
        rng_seed,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<f32>(), 1..40),
            hash in any::<u64>(),
            seed in any::<u64>(),
        ) {
            let n = vals.len();
            let ck = Checkpoint {
                records: vec![
                    ("base.w".into(), Tensor::new(vec![n], vals.clone()).unwrap()),
                    ("ctrl.b".into(), Tensor::new(vec![1, n], vals).unwrap()),
                ],
                config_hash: hash,
                rng_seed: seed,
                step: 7,
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ck).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            let mut buf2 = Vec::new();
            write_checkpoint(&mut buf2, &back).unwrap();
            prop_assert_eq!(buf, buf2);
            prop_assert_eq!(back.config_hash, hash);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
