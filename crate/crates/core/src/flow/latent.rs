//! Voxel grid <-> token sequence conversion.
//!
//! Tokens are `(G/p)³` non-overlapping `p³` patches in `(z, y, x)` order.
//! A token's features are channel-major: `[channel][dz][dy][dx]`.

use crate::error::{Error, Result};
use crate::voxel::{voxel_index, VoxelAsset};

fn check(g: usize, p: usize) -> Result<usize> {
    if p == 0 || !g.is_multiple_of(p) {
        return Err(Error::Contract(format!("patch size {p} does not divide grid {g}")));
    }
    Ok(g / p)
}

/// Converts `channels` planar grids (`[c][z][y][x]`) into `[T, c·p³]` tokens.
pub fn patchify(planes: &[f32], channels: usize, g: usize, p: usize) -> Result<Vec<f32>> {
    let n = check(g, p)?;
    let vol = g * g * g;
    if planes.len() != channels * vol {
        return Err(Error::Contract(format!(
            "expected {} values for {channels} planes of G={g}, got {}",
            channels * vol,
            planes.len()
        )));
    }
    let p3 = p * p * p;
    let width = channels * p3;
    let mut out = vec![0.0; planes.len()];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let tok = ((z / p) * n + y / p) * n + x / p;
                let off = ((z % p) * p + y % p) * p + x % p;
                let v = voxel_index(x, y, z, g);
                for c in 0..channels {
                    out[tok * width + c * p3 + off] = planes[c * vol + v];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], channels: usize, g: usize, p: usize) -> Result<Vec<f32>> {
    let n = check(g, p)?;
    let vol = g * g * g;
    if tokens.len() != channels * vol {
        return Err(Error::Contract(format!(
            "expected {} token values, got {}",
            channels * vol,
            tokens.len()
        )));
    }
    let p3 = p * p * p;
    let width = channels * p3;
    let mut out = vec![0.0; tokens.len()];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let tok = ((z / p) * n + y / p) * n + x / p;
                let off = ((z % p) * p + y % p) * p + x % p;
                let v = voxel_index(x, y, z, g);
                for c in 0..channels {
                    out[c * vol + v] = tokens[tok * width + c * p3 + off];
                }
            }
        }
    }
    Ok(out)
}

/// Geometry latent: occupied `+1`, empty `-1`.
pub fn encode_geometry(asset: &VoxelAsset, p: usize) -> Result<Vec<f32>> {
    let plane: Vec<f32> = asset.occupancy().iter().map(|&o| if o != 0 { 1.0 } else { -1.0 }).collect();
    patchify(&plane, 1, asset.grid(), p)
}

/// Sign threshold at zero.
pub fn decode_occupancy(latent: &[f32], g: usize, p: usize) -> Result<Vec<u8>> {
    Ok(unpatchify(latent, 1, g, p)?.into_iter().map(|v| u8::from(v > 0.0)).collect())
}

/// Occupancy as `{0, 1}` tokens, the texture stage's geometry input.
pub fn occupancy_tokens(occupancy: &[u8], g: usize, p: usize) -> Result<Vec<f32>> {
    let plane: Vec<f32> = occupancy.iter().map(|&o| f32::from(u8::from(o != 0))).collect();
    patchify(&plane, 1, g, p)
}

/// Texture latent: `2c - 1` on occupied voxels, `0` elsewhere.
pub fn encode_texture(asset: &VoxelAsset, p: usize) -> Result<Vec<f32>> {
    let vol = asset.len();
    let occ = asset.occupancy();
    let planes: Vec<f32> = asset
        .colors()
        .iter()
        .enumerate()
        .map(|(i, &c)| if occ[i % vol] != 0 { 2.0 * c - 1.0 } else { 0.0 })
        .collect();
    patchify(&planes, 3, asset.grid(), p)
}

/// Assembles an asset from a texture latent and an occupancy grid; colors
/// are mapped back from `[-1, 1]` and clamped to `[0, 1]`.
pub fn decode_texture(latent: &[f32], occupancy: &[u8], g: usize, p: usize) -> Result<VoxelAsset> {
    let planes = unpatchify(latent, 3, g, p)?;
    let colors = planes.into_iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    VoxelAsset::from_parts(g, occupancy.to_vec(), colors)
        .ok_or_else(|| Error::Contract("occupancy does not match grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{build_asset, SceneGraph};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn patchify_round_trip(n in 1usize..4, p in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
            let g = n * p;
            let len = c * g * g * g;
            let vals: Vec<f32> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
            let tok = patchify(&vals, c, g, p).unwrap();
            prop_assert_eq!(unpatchify(&tok, c, g, p).unwrap(), vals);
        }
    }

    #[test]
    fn token_holds_its_patch() {
        let g = 4;
        let p = 2;
        let mut plane = vec![0.0; 64];
        plane[voxel_index(3, 1, 2, g)] = 7.0;
        let tok = patchify(&plane, 1, g, p).unwrap();
        // patch (z=1, y=0, x=1) -> token 5; offset (dz=0, dy=1, dx=1) -> 3
        assert_eq!(tok[5 * 8 + 3], 7.0);
    }

    #[test]
    fn geometry_and_texture_round_trip() {
        let a = build_asset(&SceneGraph::generate(3), 16).unwrap();
        let occ = decode_occupancy(&encode_geometry(&a, 4).unwrap(), 16, 4).unwrap();
        assert_eq!(occ, a.occupancy());
        let back = decode_texture(&encode_texture(&a, 4).unwrap(), &occ, 16, 4).unwrap();
        for (x, y) in back.colors().iter().zip(a.colors()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(patchify(&[0.0; 27], 1, 3, 2).is_err());
    }
}
