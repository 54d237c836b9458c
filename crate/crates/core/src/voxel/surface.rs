use super::{voxel_coords, voxel_index, VoxelAsset};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use rand::Rng;

/// Points in unit-cube coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An exposed face: voxel index plus axis (0..3) and side (false = low).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Face {
    pub voxel: usize,
    pub axis: usize,
    pub high: bool,
}

pub(crate) fn exposed_faces(asset: &VoxelAsset) -> Vec<Face> {
    let g = asset.grid();
    let mut faces = Vec::new();
    for i in 0..asset.len() {
        if !asset.is_occupied(i) {
            continue;
        }
        let c = voxel_coords(i, g);
        let c = [c.0, c.1, c.2];
        for axis in 0..3 {
            for high in [false, true] {
                let mut n = c;
                let exposed = if high {
                    n[axis] += 1;
                    n[axis] == g || !asset.is_occupied(voxel_index(n[0], n[1], n[2], g))
                } else if c[axis] == 0 {
                    true
                } else {
                    n[axis] -= 1;
                    !asset.is_occupied(voxel_index(n[0], n[1], n[2], g))
                };
                if exposed {
                    faces.push(Face { voxel: i, axis, high });
                }
            }
        }
    }
    faces
}

/// Samples `n` points uniformly over the exposed voxel faces.
pub fn sample_surface_points(asset: &VoxelAsset, n: usize, seed: u64) -> Result<PointCloud> {
    let faces = exposed_faces(asset);
    if faces.is_empty() {
        return Err(Error::Contract("cannot sample the surface of an empty asset".into()));
    }
    let g = asset.grid() as f64;
    let mut rng = rng_from(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let f = faces[rng.random_range(0..faces.len())];
        let (x, y, z) = voxel_coords(f.voxel, asset.grid());
        let lo = [x as f64, y as f64, z as f64];
        let mut p = [0.0; 3];
        for (k, pk) in p.iter_mut().enumerate() {
            let offset = if k == f.axis {
                f64::from(u8::from(f.high))
            } else {
                rng.random::<f64>()
            };
            *pk = (lo[k] + offset) / g - 0.5;
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::PALETTE;

    #[test]
    fn single_voxel_faces_are_balanced() {
        let g = 4;
        let mut a = VoxelAsset::empty(g);
        let v = voxel_index(1, 2, 1, g);
        a.set(v, Some(PALETTE[0]));
        let n = 6000;
        let cloud = sample_surface_points(&a, n, 5).unwrap();
        let (lo, hi) = ([0.25 - 0.5, 0.5 - 0.5, 0.25 - 0.5], [0.5 - 0.5, 0.75 - 0.5, 0.5 - 0.5]);
        let mut counts = [0usize; 6];
        for p in &cloud.points {
            let mut on = 0;
            for k in 0..3 {
                assert!(p[k] >= lo[k] - 1e-12 && p[k] <= hi[k] + 1e-12);
                if (p[k] - lo[k]).abs() < 1e-12 {
                    counts[2 * k] += 1;
                    on += 1;
                } else if (p[k] - hi[k]).abs() < 1e-12 {
                    counts[2 * k + 1] += 1;
                    on += 1;
                }
            }
            assert!(on >= 1);
        }
        for c in counts {
            let rel = (c as f64 - 1000.0).abs() / 1000.0;
            assert!(rel <= 0.05, "face count {c}");
        }
    }

    #[test]
    fn solid_cube_has_only_shell_points() {
        let g = 8;
        let mut a = VoxelAsset::empty(g);
        for i in 0..a.len() {
            a.set(i, Some(PALETTE[0]));
        }
        assert_eq!(exposed_faces(&a).len(), 6 * g * g);
        let cloud = sample_surface_points(&a, 500, 1).unwrap();
        for p in cloud.points {
            assert!(p.iter().any(|v| (v.abs() - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut a = VoxelAsset::empty(4);
        a.set(3, Some(PALETTE[0]));
        a.set(7, Some(PALETTE[0]));
        assert_eq!(
            sample_surface_points(&a, 100, 9).unwrap(),
            sample_surface_points(&a, 100, 9).unwrap()
        );
        assert!(sample_surface_points(&VoxelAsset::empty(4), 10, 0).is_err());
    }
}
