use super::{voxel_index, VoxelAsset};
use serde::{Deserialize, Serialize};

/// The six canonical orthographic views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Back,
    Left,
    Right,
    Up,
    Down,
}

impl View {
    pub const ALL: [View; 6] = [View::Front, View::Back, View::Left, View::Right, View::Up, View::Down];

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Back => "back",
            View::Left => "left",
            View::Right => "right",
            View::Up => "up",
            View::Down => "down",
        }
    }

    pub fn index(self) -> u8 {
        View::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_index(i: u8) -> Option<View> {
        View::ALL.get(i as usize).copied()
    }

    pub fn parse(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Voxels along the ray through image cell `(u, v)` (column, row in
    /// voxel units, row 0 at the top), nearest first.
    fn ray(self, u: usize, v: usize, g: usize) -> impl Iterator<Item = usize> {
        let top = g - 1 - v;
        (0..g).map(move |d| {
            let far = g - 1 - d;
            match self {
                // camera on +z looking at -z; image right = +x
                View::Front => voxel_index(u, top, far, g),
                View::Back => voxel_index(g - 1 - u, top, d, g),
                // camera on -x; image right = +z
                View::Left => voxel_index(d, top, u, g),
                View::Right => voxel_index(far, top, g - 1 - u, g),
                // camera on +y; image right = +x, image up = -z
                View::Up => voxel_index(u, far, v, g),
                View::Down => voxel_index(u, d, g - 1 - v, g),
            }
        })
    }
}

/// `W×W` RGB image, row-major, interleaved channels in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub view: View,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ViewImage {
    pub fn blank(view: View, width: usize) -> Self {
        Self {
            view,
            width,
            pixels: vec![1.0; 3 * width * width],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = 3 * (row * self.width + col);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Mean per-pixel squared RGB error (averaged over channels).
    pub fn mse(&self, other: &Self) -> f64 {
        self.masked_mse(other, None)
    }

    /// As [`Self::mse`] over the pixels where `mask` is false; 0 if every
    /// pixel is masked.
    pub fn masked_mse(&self, other: &Self, mask: Option<&[bool]>) -> f64 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for p in 0..self.width * self.width {
            if mask.is_some_and(|m| m[p]) {
                continue;
            }
            for c in 0..3 {
                let d = f64::from(self.pixels[3 * p + c]) - f64::from(other.pixels[3 * p + c]);
                sum += d * d;
            }
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / (3 * count) as f64
        }
    }
}

fn cell(p: usize, width: usize, g: usize) -> usize {
    p * g / width
}

/// For each pixel, the first occupied voxel hit along the view ray.
pub fn render_hits(asset: &VoxelAsset, view: View, width: usize) -> Vec<Option<usize>> {
    let g = asset.grid();
    let mut hits = Vec::with_capacity(width * width);
    for r in 0..width {
        for c in 0..width {
            let (u, v) = (cell(c, width, g), cell(r, width, g));
            hits.push(view.ray(u, v, g).find(|&i| asset.is_occupied(i)));
        }
    }
    hits
}

/// Flat-shaded orthographic render on a white background.
pub fn render_ortho(asset: &VoxelAsset, view: View, width: usize) -> ViewImage {
    let mut img = ViewImage::blank(view, width);
    for (p, hit) in render_hits(asset, view, width).into_iter().enumerate() {
        if let Some(i) = hit {
            img.pixels[3 * p..3 * p + 3].copy_from_slice(&asset.color(i));
        }
    }
    img
}
