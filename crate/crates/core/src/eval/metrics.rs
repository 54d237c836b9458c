use crate::error::{Error, Result};
use crate::voxel::{render_ortho, PointCloud, View, VoxelAsset};

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact nearest-neighbor queries over a cloud sorted along x.
pub(crate) struct NearestIndex<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    xs: Vec<f64>,
}

impl<'a> NearestIndex<'a> {
    pub(crate) fn new(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&i, &j| points[i][0].total_cmp(&points[j][0]).then(i.cmp(&j)));
        let xs = order.iter().map(|&i| points[i][0]).collect();
        Self { points, order, xs }
    }

    /// Index of the nearest point and its squared distance; ties go to the
    /// lowest index.
    pub(crate) fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let start = self.xs.partition_point(|&x| x < q[0]);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |k: usize, best: &mut (usize, f64)| {
            let i = self.order[k];
            let d = sq_dist(q, &self.points[i]);
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        };
        let mut hi = start;
        while hi < self.xs.len() {
            let dx = self.xs[hi] - q[0];
            if dx * dx > best.1 {
                break;
            }
            consider(hi, &mut best);
            hi += 1;
        }
        let mut lo = start;
        while lo > 0 {
            lo -= 1;
            let dx = q[0] - self.xs[lo];
            if dx * dx > best.1 {
                break;
            }
            consider(lo, &mut best);
        }
        best
    }
}

fn nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("metric needs two nonempty point clouds".into()));
    }
    Ok(())
}

fn directed_mean(from: &PointCloud, to: &NearestIndex<'_>) -> f64 {
    from.points.iter().map(|p| to.nearest(p).1.sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbor (Euclidean, non-squared) distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    nonempty(a, b)?;
    let (ia, ib) = (NearestIndex::new(&a.points), NearestIndex::new(&b.points));
    Ok(0.5 * (directed_mean(a, &ib) + directed_mean(b, &ia)))
}

/// F1 at distance threshold `tau`; a point hits when its nearest neighbor
/// in the other cloud lies within `tau`.
pub fn f1_score(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<f64> {
    nonempty(pred, gt)?;
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("F1 threshold {tau} must be positive")));
    }
    let t2 = tau * tau;
    let hits = |from: &PointCloud, to: &PointCloud| {
        let idx = NearestIndex::new(&to.points);
        from.points.iter().filter(|p| idx.nearest(p).1 <= t2).count() as f64 / from.len() as f64
    };
    let (p, r) = (hits(pred, gt), hits(gt, pred));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean over the six canonical views of the per-pixel RGB MSE between
/// renders of the two assets.
pub fn view_distance(pred: &VoxelAsset, gt: &VoxelAsset, width: usize) -> Result<f64> {
    if pred.grid() != gt.grid() {
        return Err(Error::shape("view-distance", format!("grid {} vs {}", pred.grid(), gt.grid())));
    }
    if width == 0 {
        return Err(Error::Contract("view width must be positive".into()));
    }
    let total: f64 = View::ALL
        .iter()
        .map(|&v| render_ortho(pred, v, width).mse(&render_ortho(gt, v, width)))
        .sum();
    Ok(total / View::ALL.len() as f64)
}

/// Voxels occupied in both assets whose nearest palette color differs.
pub fn palette_changes(a: &VoxelAsset, b: &VoxelAsset) -> usize {
    (0..a.len())
        .filter(|&i| a.is_occupied(i) && b.is_occupied(i) && a.palette_index(i) != b.palette_index(i))
        .count()
}

/// Size of the change between two assets: occupancy symmetric difference
/// for geometry edits, recolored voxels for texture edits.
pub fn edit_magnitude(a: &VoxelAsset, b: &VoxelAsset, texture: bool) -> usize {
    if texture {
        palette_changes(a, b)
    } else {
        a.occupancy_difference(b)
    }
}

/// No-edit verdict for one example; `None` when the reference edit is
/// empty and the example cannot be judged.
pub fn is_no_edit(pred: &VoxelAsset, source: &VoxelAsset, gt: &VoxelAsset, texture: bool, threshold: f64) -> Option<bool> {
    let reference = edit_magnitude(gt, source, texture);
    if reference == 0 {
        return None;
    }
    Some((edit_magnitude(pred, source, texture) as f64) < threshold * reference as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoEditSummary {
    pub rate: f64,
    pub counted: usize,
    pub judged: usize,
    pub excluded: usize,
}

/// One example for [`no_edit_rate`].
#[derive(Clone, Copy, Debug)]
pub struct NoEditCase<'a> {
    pub pred: &'a VoxelAsset,
    pub source: &'a VoxelAsset,
    pub gt: &'a VoxelAsset,
    pub texture: bool,
}

/// Fraction of judged examples whose prediction barely differs from the
/// source. Examples with `gt == source` are excluded with a warning.
pub fn no_edit_rate(cases: &[NoEditCase<'_>], threshold: f64) -> NoEditSummary {
    let mut counted = 0;
    let mut judged = 0;
    let mut excluded = 0;
    for (i, c) in cases.iter().enumerate() {
        match is_no_edit(c.pred, c.source, c.gt, c.texture, threshold) {
            None => {
                eprintln!("warning: example {i} has an empty reference edit and is excluded from the no-edit rate");
                excluded += 1;
            }
            Some(hit) => {
                judged += 1;
                counted += usize::from(hit);
            }
        }
    }
    NoEditSummary {
        rate: if judged == 0 { 0.0 } else { counted as f64 / judged as f64 },
        counted,
        judged,
        excluded,
    }
}
