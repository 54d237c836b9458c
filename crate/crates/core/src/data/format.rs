//! "S3DP" dataset files.
//!
//! Layout (little-endian): magic `S3DP`, version `u32`, `G` `u32`, `W` `u32`,
//! record count `u64`, then per record:
//!
//! * scene seed `u64`
//! * instruction tokens `4 × u16`, then category, slot, color and size as
//!   `u8` (`0xFF` when the field does not apply)
//! * source occupancy, `G³` bits packed LSB-first, then `3·G³` planar `f32`
//!   colors; the edited asset likewise
//! * condition image, `3·W²` interleaved RGB `f32`
//! * flags byte: bit 0 corrupted, bit 1 correctness pass, bit 2 consistency
//!   pass, bits 3-5 condition view, bits 6-7 split
//! * consistency score `f32`

use super::{EditPairRecord, Split};
use crate::error::{Error, Result};
use crate::voxel::{encode_instruction, Category, EditInstruction, View, ViewImage, VoxelAsset};
use std::io::{Read, Seek, SeekFrom, Write};

pub const DATASET_MAGIC: &[u8; 4] = b"S3DP";
pub const DATASET_VERSION: u32 = 1;
const NA: u8 = 0xFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub grid: usize,
    pub view_size: usize,
    pub count: u64,
}

fn put_asset(out: &mut Vec<u8>, a: &VoxelAsset) {
    let mut bits = vec![0u8; a.len().div_ceil(8)];
    for (i, &o) in a.occupancy().iter().enumerate() {
        if o != 0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    for v in a.colors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_record(r: &EditPairRecord) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&r.seed.to_le_bytes());
    for t in encode_instruction(&r.instruction)? {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let (cat, slot, color, size) = match r.instruction {
        EditInstruction::Addition { slot, size, color } => (0, slot, color, size),
        EditInstruction::Removal { slot } => (1, slot, NA, NA),
        EditInstruction::Texture { slot, color } => (2, slot, color, NA),
    };
    out.extend_from_slice(&[cat, slot, color, size]);
    put_asset(&mut out, &r.source);
    put_asset(&mut out, &r.edited);
    for v in &r.condition.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let flags = u8::from(r.corrupted)
        | (u8::from(r.correctness_pass) << 1)
        | (u8::from(r.consistency_pass) << 2)
        | (r.condition.view.index() << 3)
        | (r.split.code() << 6);
    out.push(flags);
    out.extend_from_slice(&r.consistency_score.to_le_bytes());
    Ok(out)
}

/// Writes a complete dataset to `w`.
pub fn write_dataset<W: Write + Seek>(mut w: W, grid: usize, view_size: usize, records: &[EditPairRecord]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(grid as u32).to_le_bytes())?;
    w.write_all(&(view_size as u32).to_le_bytes())?;
    let count_pos = w.stream_position()?;
    w.write_all(&0u64.to_le_bytes())?;
    let mut count = 0u64;
    for r in records {
        if r.source.grid() != grid || r.condition.width != view_size {
            return Err(Error::Contract(format!("record seed {} does not match the dataset dimensions", r.seed)));
        }
        w.write_all(&encode_record(r)?)?;
        count += 1;
    }
    let end = w.stream_position()?;
    w.seek(SeekFrom::Start(count_pos))?;
    w.write_all(&count.to_le_bytes())?;
    w.seek(SeekFrom::Start(end))?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("dataset truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn asset(&mut self, g: usize) -> Result<VoxelAsset> {
        let n = g * g * g;
        let bits = self.take(n.div_ceil(8))?;
        let occ: Vec<u8> = (0..n).map(|i| (bits[i / 8] >> (i % 8)) & 1).collect();
        let colors = self.f32s(3 * n)?;
        VoxelAsset::from_parts(g, occ, colors).ok_or_else(|| Error::Format("bad asset planes".into()))
    }
}

fn decode_instruction_fields(cat: u8, slot: u8, color: u8, size: u8) -> Result<EditInstruction> {
    let cat = match cat {
        0 => Category::Addition,
        1 => Category::Removal,
        2 => Category::Texture,
        c => return Err(Error::Format(format!("unknown category code {c}"))),
    };
    Ok(match cat {
        Category::Addition => EditInstruction::Addition { slot, size, color },
        Category::Removal => EditInstruction::Removal { slot },
        Category::Texture => EditInstruction::Texture { slot, color },
    })
}

/// Reads a dataset and validates every record against its regenerated scene.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<EditPairRecord>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not an S3DP dataset".into()));
    }
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let grid = c.u32()? as usize;
    let view_size = c.u32()? as usize;
    let count = c.u64()?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let seed = c.u64()?;
        let mut tokens = [0u16; 4];
        for t in &mut tokens {
            *t = c.u16()?;
        }
        let fields = c.take(4)?;
        let instruction = decode_instruction_fields(fields[0], fields[1], fields[2], fields[3])?;
        let source = c.asset(grid)?;
        let edited = c.asset(grid)?;
        let pixels = c.f32s(3 * view_size * view_size)?;
        let flags = c.u8()?;
        let score = f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        let view = View::from_index((flags >> 3) & 0b111).ok_or_else(|| Error::Format("bad view code".into()))?;
        let split = Split::from_code(flags >> 6).ok_or_else(|| Error::Format("bad split code".into()))?;
        let record = EditPairRecord {
            seed,
            source,
            instruction,
            tokens,
            edited,
            condition: ViewImage {
                view,
                width: view_size,
                pixels,
            },
            corrupted: flags & 1 != 0,
            correctness_pass: flags & 2 != 0,
            consistency_pass: flags & 4 != 0,
            consistency_score: score,
            split,
        };
        record.validate()?;
        records.push(record);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok((DatasetHeader { grid, view_size, count }, records))
}
