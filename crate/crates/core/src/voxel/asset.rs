use super::{voxel_coords, PALETTE};

/// Dense occupancy grid with per-voxel color.
///
/// Colors are stored as three planes of `G³` values; they are zero at every
/// unoccupied voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelAsset {
    g: usize,
    occupancy: Vec<u8>,
    colors: Vec<f32>,
}

impl VoxelAsset {
    pub fn empty(g: usize) -> Self {
        let n = g * g * g;
        Self {
            g,
            occupancy: vec![0; n],
            colors: vec![0.0; 3 * n],
        }
    }

    /// Builds an asset from raw planes, zeroing colors outside occupancy.
    pub fn from_parts(g: usize, occupancy: Vec<u8>, mut colors: Vec<f32>) -> Option<Self> {
        let n = g * g * g;
        if occupancy.len() != n || colors.len() != 3 * n || occupancy.iter().any(|&o| o > 1) {
            return None;
        }
        for (i, &o) in occupancy.iter().enumerate() {
            if o == 0 {
                for c in 0..3 {
                    colors[c * n + i] = 0.0;
                }
            }
        }
        Some(Self { g, occupancy, colors })
    }

    pub fn grid(&self) -> usize {
        self.g
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count() == 0
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn colors(&self) -> &[f32] {
        &self.colors
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.occupancy[i] == 1
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o == 1).count()
    }

    pub fn color(&self, i: usize) -> [f32; 3] {
        let n = self.len();
        [self.colors[i], self.colors[n + i], self.colors[2 * n + i]]
    }

    /// Sets a voxel; `None` clears it.
    pub fn set(&mut self, i: usize, color: Option<[f32; 3]>) {
        let n = self.len();
        match color {
            Some(c) => {
                self.occupancy[i] = 1;
                for (k, v) in c.iter().enumerate() {
                    self.colors[k * n + i] = *v;
                }
            }
            None => {
                self.occupancy[i] = 0;
                for k in 0..3 {
                    self.colors[k * n + i] = 0.0;
                }
            }
        }
    }

    /// Replaces the occupancy, keeping colors where still occupied and
    /// giving newly occupied voxels `fill`.
    pub fn with_occupancy(&self, occupancy: &[u8], fill: [f32; 3]) -> Self {
        let mut out = self.clone();
        for (i, &o) in occupancy.iter().enumerate() {
            match (self.is_occupied(i), o == 1) {
                (true, false) => out.set(i, None),
                (false, true) => out.set(i, Some(fill)),
                _ => {}
            }
        }
        out
    }

    /// Intersection-over-union of the occupancy grids.
    pub fn iou(&self, other: &Self) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.occupancy.iter().zip(&other.occupancy) {
            inter += usize::from(*a == 1 && *b == 1);
            union += usize::from(*a == 1 || *b == 1);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Number of voxels whose occupancy differs.
    pub fn occupancy_difference(&self, other: &Self) -> usize {
        self.occupancy.iter().zip(&other.occupancy).filter(|(a, b)| a != b).count()
    }

    /// Voxels occupied in both assets whose color differs by more than
    /// `threshold` in some channel.
    pub fn color_difference(&self, other: &Self, threshold: f32) -> usize {
        (0..self.len())
            .filter(|&i| self.is_occupied(i) && other.is_occupied(i))
            .filter(|&i| {
                let (a, b) = (self.color(i), other.color(i));
                (0..3).any(|k| (a[k] - b[k]).abs() > threshold)
            })
            .count()
    }

    /// Index of the closest palette entry for an occupied voxel.
    pub fn palette_index(&self, i: usize) -> u8 {
        let c = self.color(i);
        let mut best = (f32::INFINITY, 0u8);
        for (k, p) in PALETTE.iter().enumerate() {
            let d: f32 = (0..3).map(|j| (c[j] - p[j]).powi(2)).sum();
            if d < best.0 {
                best = (d, k as u8);
            }
        }
        best.1
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        voxel_coords(i, self.g)
    }
}
