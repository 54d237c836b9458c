//! The procedural asset universe.
//!
//! Scenes are short lists of primitives, each occupying one of six part
//! slots with a fixed anchor (body, head, base, two arms, antenna). A slot
//! fixes the primitive kind and position; a size bucket and a palette
//! color are the only free parameters. This keeps every asset identifiable
//! from its front view and makes edit instructions exactly tokenizable.

mod asset;
mod export;
mod instruction;
mod render;
mod surface;

pub use asset::VoxelAsset;
pub use export::{read_ppm, read_voxel_debug, write_ppm, write_voxel_debug};
pub use instruction::{
    decode_instruction, encode_instruction, Category, EditInstruction, InstrTokens, NULL_TOKENS, VOCAB_SIZE,
};
pub use render::{render_hits, render_ortho, View, ViewImage};
pub use surface::{sample_surface_points, PointCloud};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GRID: usize = 16;
pub const DEFAULT_VIEW: usize = 32;
pub const SLOT_COUNT: u8 = 6;
pub const SIZE_BUCKETS: u8 = 4;
pub const PALETTE_LEN: u8 = 8;

/// Fixed 8-entry color palette (RGB in [0,1]). White is reserved for the
/// render background.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10], // red
    [0.10, 0.70, 0.20], // green
    [0.15, 0.30, 0.90], // blue
    [0.95, 0.85, 0.10], // yellow
    [0.10, 0.80, 0.85], // cyan
    [0.80, 0.20, 0.80], // magenta
    [0.95, 0.55, 0.10], // orange
    [0.35, 0.35, 0.35], // gray
];

pub const PALETTE_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "gray"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimitiveKind {
    Box,
    Sphere,
    /// Axis along +y.
    Cylinder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    /// Center in unit-cube coordinates, each in [-0.5, 0.5].
    pub center: [f64; 3],
    /// Box half-extents; `[r, r, r]` for spheres; `[r, half_height, r]` for cylinders.
    pub half: [f64; 3],
    pub color: u8,
    pub slot: u8,
    pub size: u8,
}

impl Primitive {
    /// The canonical primitive for a slot, size bucket and color.
    pub fn canonical(slot: u8, size: u8, color: u8) -> Result<Self> {
        if slot >= SLOT_COUNT || size >= SIZE_BUCKETS || color >= PALETTE_LEN {
            return Err(Error::InvalidInstruction(format!(
                "primitive out of range: slot {slot}, size {size}, color {color}"
            )));
        }
        let s = size as usize;
        let (kind, center, half) = match slot {
            0 => {
                let e = [0.14, 0.18, 0.22, 0.26][s];
                (PrimitiveKind::Box, [0.0, 0.0, 0.0], [e, e * 0.85, e])
            }
            1 => {
                let r = [0.10, 0.12, 0.15, 0.18][s];
                (PrimitiveKind::Sphere, [0.0, 0.30, 0.0], [r, r, r])
            }
            2 => {
                let e = [0.12, 0.18, 0.24, 0.30][s];
                (PrimitiveKind::Box, [0.0, -0.38, 0.0], [e, 0.08, e])
            }
            3 | 4 => {
                let r = [0.06, 0.08, 0.10, 0.12][s];
                let h = [0.14, 0.17, 0.20, 0.24][s];
                let x = if slot == 3 { -0.31 } else { 0.31 };
                (PrimitiveKind::Cylinder, [x, 0.02, 0.0], [r, h, r])
            }
            _ => {
                let r = [0.06, 0.08, 0.10, 0.12][s];
                (PrimitiveKind::Sphere, [0.30, 0.34, 0.0], [r, r, r])
            }
        };
        Ok(Self {
            kind,
            center,
            half,
            color,
            slot,
            size,
        })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            PrimitiveKind::Box => (0..3).all(|i| d[i].abs() <= self.half[i]),
            PrimitiveKind::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= self.half[0] * self.half[0],
            PrimitiveKind::Cylinder => {
                d[0] * d[0] + d[2] * d[2] <= self.half[0] * self.half[0] && d[1].abs() <= self.half[1]
            }
        }
    }

    pub fn fits_unit_cube(&self) -> bool {
        (0..3).all(|i| self.center[i].abs() + self.half[i] <= 0.5 + 1e-12)
    }
}

/// Ordered primitive list; later primitives overwrite earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

/// Center of voxel `i` along one axis in unit-cube coordinates.
pub fn voxel_center(i: usize, g: usize) -> f64 {
    (i as f64 + 0.5) / g as f64 - 0.5
}

/// Flat voxel index; x is fastest, z slowest.
pub fn voxel_index(x: usize, y: usize, z: usize, g: usize) -> usize {
    (z * g + y) * g + x
}

pub fn voxel_coords(i: usize, g: usize) -> (usize, usize, usize) {
    (i % g, (i / g) % g, i / (g * g))
}

impl SceneGraph {
    /// Draws a scene: the body is always present, every other slot with
    /// probability one half.
    pub fn generate(seed: u64) -> Self {
        let mut rng = stream_rng(seed, "scene", 0);
        let mut primitives = Vec::new();
        for slot in 0..SLOT_COUNT {
            if slot == 0 || rng.random_bool(0.5) {
                let size = rng.random_range(0..SIZE_BUCKETS);
                let color = rng.random_range(0..PALETTE_LEN);
                primitives.push(Primitive::canonical(slot, size, color).expect("in range"));
            }
        }
        Self { seed, primitives }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.primitives.len() > SLOT_COUNT as usize {
            return Err(Error::DegenerateScene(format!("{} primitives", self.primitives.len())));
        }
        let mut seen = [false; SLOT_COUNT as usize];
        for p in &self.primitives {
            if p.slot >= SLOT_COUNT || std::mem::replace(&mut seen[p.slot as usize], true) {
                return Err(Error::DegenerateScene(format!("slot {} repeated or out of range", p.slot)));
            }
            if !p.fits_unit_cube() {
                return Err(Error::DegenerateScene(format!("slot {} leaves the unit cube", p.slot)));
            }
        }
        Ok(())
    }

    pub fn slot(&self, slot: u8) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.slot == slot)
    }

    pub fn has_slot(&self, slot: u8) -> bool {
        self.slot(slot).is_some()
    }

    /// For every voxel, the slot of the last primitive covering its center.
    pub fn owner_map(&self, g: usize) -> Vec<Option<u8>> {
        let mut owner = vec![None; g * g * g];
        for (i, o) in owner.iter_mut().enumerate() {
            let (x, y, z) = voxel_coords(i, g);
            let p = [voxel_center(x, g), voxel_center(y, g), voxel_center(z, g)];
            *o = self.primitives.iter().rev().find(|pr| pr.contains(p)).map(|pr| pr.slot);
        }
        owner
    }
}

/// Voxelizes a scene: a voxel is occupied iff its center lies in some
/// primitive, and takes the color of the last such primitive.
pub fn build_asset(scene: &SceneGraph, g: usize) -> Result<VoxelAsset> {
    scene.validate()?;
    let owner = scene.owner_map(g);
    let mut asset = VoxelAsset::empty(g);
    for (i, o) in owner.iter().enumerate() {
        if let Some(slot) = o {
            let color = PALETTE[scene.slot(*slot).expect("owner exists").color as usize];
            asset.set(i, Some(color));
        }
    }
    if asset.occupied_count() == 0 {
        return Err(Error::DegenerateScene("no voxel is occupied".into()));
    }
    Ok(asset)
}

/// Applies an instruction to the scene graph (the ground-truth edit).
pub fn apply_edit(scene: &SceneGraph, instr: &EditInstruction) -> Result<SceneGraph> {
    instr.validate_for(scene)?;
    let mut out = scene.clone();
    match *instr {
        EditInstruction::Removal { slot } => out.primitives.retain(|p| p.slot != slot),
        EditInstruction::Texture { slot, color } => {
            for p in out.primitives.iter_mut().filter(|p| p.slot == slot) {
                p.color = color;
            }
        }
        EditInstruction::Addition { slot, size, color } => {
            out.primitives.push(Primitive::canonical(slot, size, color)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_primitives_fit() {
        for slot in 0..SLOT_COUNT {
            for size in 0..SIZE_BUCKETS {
                assert!(Primitive::canonical(slot, size, 0).unwrap().fits_unit_cube());
            }
        }
    }

    #[test]
    fn full_box_occupies_everything() {
        let scene = SceneGraph {
            seed: 0,
            primitives: vec![Primitive {
                kind: PrimitiveKind::Box,
                center: [0.0; 3],
                half: [0.5; 3],
                color: 2,
                slot: 0,
                size: 0,
            }],
        };
        let a = build_asset(&scene, 16).unwrap();
        assert_eq!(a.occupied_count(), 4096);
        assert!((0..4096).all(|i| a.color(i) == PALETTE[2]));
    }

    #[test]
    fn sphere_matches_brute_force_count() {
        let sphere = Primitive {
            kind: PrimitiveKind::Sphere,
            center: [0.0; 3],
            half: [0.25; 3],
            color: 0,
            slot: 0,
            size: 0,
        };
        let scene = SceneGraph { seed: 0, primitives: vec![sphere] };
        let g = 16;
        let mut expected = 0;
        for x in 0..g {
            for y in 0..g {
                for z in 0..g {
                    let c = [voxel_center(x, g), voxel_center(y, g), voxel_center(z, g)];
                    if c.iter().map(|v| v * v).sum::<f64>() <= 0.0625 {
                        expected += 1;
                    }
                }
            }
        }
        assert!(expected > 0);
        assert_eq!(build_asset(&scene, g).unwrap().occupied_count(), expected);
    }

    #[test]
    fn overlap_takes_last_color() {
        let mk = |cx: f64, color| Primitive {
            kind: PrimitiveKind::Box,
            center: [cx, 0.0, 0.0],
            half: [0.2, 0.2, 0.2],
            color,
            slot: color,
            size: 0,
        };
        let scene = SceneGraph { seed: 0, primitives: vec![mk(-0.1, 1), mk(0.1, 3)] };
        let a = build_asset(&scene, 16).unwrap();
        let mid = voxel_index(8, 8, 8, 16); // center 0.03125: inside both
        assert_eq!(a.color(mid), PALETTE[3]);
    }

    #[test]
    fn empty_scene_is_degenerate() {
        let scene = SceneGraph { seed: 0, primitives: vec![] };
        assert!(matches!(build_asset(&scene, 16), Err(Error::DegenerateScene(_))));
    }

    #[test]
    fn texture_edit_keeps_occupancy() {
        let scene = SceneGraph::generate(3);
        let slot = scene.primitives[0].slot;
        let color = (scene.primitives[0].color + 1) % PALETTE_LEN;
        let edited = apply_edit(&scene, &EditInstruction::Texture { slot, color }).unwrap();
        let a = build_asset(&scene, 16).unwrap();
        let b = build_asset(&edited, 16).unwrap();
        assert_eq!(a.occupancy(), b.occupancy());
        assert_ne!(a.colors(), b.colors());
    }

    #[test]
    fn removal_of_isolated_part_is_its_voxel_set() {
        // Find a scene where the antenna exists; it touches no other part at G=16.
        let scene = (0..200).map(SceneGraph::generate).find(|s| s.has_slot(5)).unwrap();
        let g = 16;
        let before = build_asset(&scene, g).unwrap();
        let after = build_asset(&apply_edit(&scene, &EditInstruction::Removal { slot: 5 }).unwrap(), g).unwrap();
        let antenna = SceneGraph { seed: 0, primitives: vec![*scene.slot(5).unwrap()] };
        let owner_alone = antenna.owner_map(g);
        let others = SceneGraph {
            seed: 0,
            primitives: scene.primitives.iter().filter(|p| p.slot != 5).copied().collect(),
        }
        .owner_map(g);
        assert!(owner_alone.iter().zip(&others).all(|(a, b)| a.is_none() || b.is_none()), "antenna overlaps");
        for (i, owner) in owner_alone.iter().enumerate() {
            let removed = before.is_occupied(i) && !after.is_occupied(i);
            assert_eq!(removed, owner.is_some());
        }
    }

    #[test]
    fn add_then_remove_is_identity() {
        let scene = (0..200).map(SceneGraph::generate).find(|s| !s.has_slot(4)).unwrap();
        let add = EditInstruction::Addition { slot: 4, size: 2, color: 5 };
        let added = apply_edit(&scene, &add).unwrap();
        let back = apply_edit(&added, &EditInstruction::Removal { slot: 4 }).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn missing_target_is_invalid() {
        let scene = (0..200).map(SceneGraph::generate).find(|s| !s.has_slot(2)).unwrap();
        let err = apply_edit(&scene, &EditInstruction::Removal { slot: 2 }).unwrap_err();
        assert!(matches!(err, Error::InvalidInstruction(_)));
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        for seed in 0..100 {
            let s = SceneGraph::generate(seed);
            assert_eq!(s, SceneGraph::generate(seed));
            s.validate().unwrap();
            assert!(build_asset(&s, 16).is_ok());
        }
    }
}
