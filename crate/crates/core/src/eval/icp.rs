use super::metrics::NearestIndex;
use crate::error::{Error, Result};
use crate::voxel::PointCloud;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpOptions {
    pub max_iterations: usize,
    /// Stop once the residual improves by less than this.
    pub tolerance: f64,
    /// Fit a uniform scale along with rotation and translation.
    pub with_scale: bool,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            with_scale: true,
        }
    }
}

/// `x ↦ scale · R x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply_cloud(&self, c: &PointCloud) -> PointCloud {
        PointCloud::new(c.points.iter().map(|p| self.apply(p)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    pub transform: Similarity,
    pub aligned: PointCloud,
    /// Mean squared nearest-neighbor distance, starting with the initial
    /// alignment and then after each accepted iteration.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

impl IcpResult {
    pub fn residual(&self) -> f64 {
        *self.residuals.last().expect("at least the initial residual")
    }
}

fn to_vec(p: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    points.iter().map(to_vec).sum::<Vector3<f64>>() / points.len() as f64
}

fn check_cloud(c: &PointCloud, name: &str) -> Result<()> {
    if c.len() < 4 {
        return Err(Error::Contract(format!("ICP needs at least 4 {name} points, got {}", c.len())));
    }
    if c.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericFault(format!("non-finite {name} point")));
    }
    let mu = centroid(&c.points);
    let mut cov = Matrix3::zeros();
    for p in &c.points {
        let d = to_vec(p) - mu;
        cov += d * d.transpose();
    }
    let sv = cov.singular_values();
    let max = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-12 * max.max(f64::MIN_POSITIVE)).count();
    if max <= 0.0 || rank < 2 {
        return Err(Error::Contract(format!("{name} points are degenerate (rank {rank})")));
    }
    Ok(())
}

/// Least-squares similarity taking `src[i]` onto `dst[i]`.
pub fn fit_similarity(src: &[[f64; 3]], dst: &[[f64; 3]], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::Contract("similarity fit needs paired points".into()));
    }
    let n = src.len() as f64;
    let (mx, my) = (centroid(src), centroid(dst));
    let mut sigma = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (x, y) = (to_vec(a) - mx, to_vec(b) - my);
        sigma += y * x.transpose();
        var_x += x.norm_squared();
    }
    sigma /= n;
    var_x /= n;
    let svd = sigma.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        if var_x <= 0.0 {
            return Err(Error::Contract("source points have zero spread".into()));
        }
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x
    } else {
        1.0
    };
    Ok(Similarity {
        translation: my - rotation * mx * scale,
        rotation,
        scale,
    })
}

fn rms_radius(points: &[[f64; 3]]) -> f64 {
    let mu = centroid(points);
    (points.iter().map(|p| (to_vec(p) - mu).norm_squared()).sum::<f64>() / points.len() as f64).sqrt()
}

fn principal_axes(points: &[[f64; 3]]) -> Matrix3<f64> {
    let mu = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = to_vec(p) - mu;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ])
}

/// Starting rotations: identity, then the four proper rotations taking the
/// principal axes of `src` onto those of `dst`.
fn initial_rotations(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Vec<Matrix3<f64>> {
    let (es, ed) = (principal_axes(src), principal_axes(dst));
    let mut out = vec![Matrix3::identity()];
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let mut r = ed * Matrix3::from_diagonal(&Vector3::from(signs)) * es.transpose();
        if r.determinant() < 0.0 {
            let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
            r = ed * flip * Matrix3::from_diagonal(&Vector3::from(signs)) * es.transpose();
        }
        out.push(r);
    }
    out
}

fn run_icp(src: &PointCloud, dst: &PointCloud, index: &NearestIndex<'_>, start: Similarity, opts: &IcpOptions) -> Result<IcpResult> {
    let matches = |t: &Similarity| -> (Vec<[f64; 3]>, f64) {
        let mut total = 0.0;
        let pairs = src
            .points
            .iter()
            .map(|p| {
                let (j, d) = index.nearest(&t.apply(p));
                total += d;
                dst.points[j]
            })
            .collect();
        (pairs, total / src.len() as f64)
    };
    let mut transform = start;
    let (mut pairs, r0) = matches(&transform);
    let mut residuals = vec![r0];
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let next = fit_similarity(&src.points, &pairs, opts.with_scale)?;
        let (next_pairs, r) = matches(&next);
        let prev = *residuals.last().expect("nonempty");
        if !(r <= prev) {
            break;
        }
        iterations += 1;
        transform = next;
        pairs = next_pairs;
        residuals.push(r);
        if prev - r < opts.tolerance {
            break;
        }
    }
    Ok(IcpResult {
        aligned: transform.apply_cloud(src),
        transform,
        residuals,
        iterations,
    })
}

/// Iterative closest point with a closed-form similarity fit per iteration.
/// Each run starts from centroid and spread matching and alternates nearest
/// neighbors in `dst` with a least-squares refit of the full transform.
/// Runs start from the identity and from principal-axis alignments; the
/// run with the lowest final residual is returned.
pub fn icp_align(src: &PointCloud, dst: &PointCloud, opts: &IcpOptions) -> Result<IcpResult> {
    check_cloud(src, "source")?;
    check_cloud(dst, "target")?;
    let index = NearestIndex::new(&dst.points);
    let scale = if opts.with_scale { rms_radius(&dst.points) / rms_radius(&src.points) } else { 1.0 };
    let (cs, cd) = (centroid(&src.points), centroid(&dst.points));
    let mut best: Option<IcpResult> = None;
    for rotation in initial_rotations(&src.points, &dst.points) {
        let start = Similarity {
            translation: cd - rotation * cs * scale,
            rotation,
            scale,
        };
        let run = run_icp(src, dst, &index, start, opts)?;
        if best.as_ref().is_none_or(|b| run.residual() < b.residual()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}
