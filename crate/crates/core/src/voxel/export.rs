//! Debug exports: run-length encoded voxel grids and PPM renders.
//!
//! Voxel layout: magic `VXDB`, `G` as `u32`, then the occupancy as
//! alternating run lengths (starting with an empty run, possibly zero),
//! each a LEB128 varint, then the three color planes as `f32` LE.

use super::{VoxelAsset, View, ViewImage};
use crate::error::{Error, Result};

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let b = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf.get(*pos).ok_or_else(|| Error::Format("truncated varint".into()))?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format("varint overflow".into()))
}

pub fn write_voxel_debug(asset: &VoxelAsset) -> Vec<u8> {
    let mut out = b"VXDB".to_vec();
    out.extend_from_slice(&(asset.grid() as u32).to_le_bytes());
    let mut current = 0u8;
    let mut run = 0u64;
    for &o in asset.occupancy() {
        if o == current {
            run += 1;
        } else {
            put_varint(&mut out, run);
            current = o;
            run = 1;
        }
    }
    put_varint(&mut out, run);
    for v in asset.colors() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_voxel_debug(buf: &[u8]) -> Result<VoxelAsset> {
    if buf.len() < 8 || &buf[..4] != b"VXDB" {
        return Err(Error::Format("not a VXDB voxel file".into()));
    }
    let g = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    let n = g * g * g;
    let mut pos = 8;
    let mut occupancy = Vec::with_capacity(n);
    let mut current = 0u8;
    while occupancy.len() < n {
        let run = get_varint(buf, &mut pos)? as usize;
        if occupancy.len() + run > n {
            return Err(Error::Format("occupancy runs overflow the grid".into()));
        }
        occupancy.extend(std::iter::repeat_n(current, run));
        current ^= 1;
    }
    let rest = &buf[pos..];
    if rest.len() != 12 * n {
        return Err(Error::Format(format!("expected {} color bytes, got {}", 12 * n, rest.len())));
    }
    let colors = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    VoxelAsset::from_parts(g, occupancy, colors).ok_or_else(|| Error::Format("inconsistent voxel planes".into()))
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(img: &ViewImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.width).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_ppm(buf: &[u8], view: View) -> Result<ViewImage> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if w != h || w == 0 {
        return Err(bad("image must be square"));
    }
    let body = buf.get(pos..pos + 3 * w * w).ok_or_else(|| bad("truncated pixels"))?;
    Ok(ViewImage {
        view,
        width: w,
        pixels: body.iter().map(|&b| f32::from(b) / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{build_asset, render_ortho, SceneGraph};

    #[test]
    fn voxel_debug_round_trip() {
        for seed in 0..10 {
            let a = build_asset(&SceneGraph::generate(seed), 16).unwrap();
            let bytes = write_voxel_debug(&a);
            assert_eq!(read_voxel_debug(&bytes).unwrap(), a);
        }
        let empty = VoxelAsset::empty(4);
        assert_eq!(read_voxel_debug(&write_voxel_debug(&empty)).unwrap(), empty);
    }

    #[test]
    fn ppm_round_trip_on_palette_renders() {
        let a = build_asset(&SceneGraph::generate(1), 16).unwrap();
        let img = render_ortho(&a, View::Front, 32);
        let back = read_ppm(&write_ppm(&img), View::Front).unwrap();
        assert!(img.mse(&back) < 1e-5);
    }
}
