use super::*;
use crate::data::{EditPairRecord, Split};
use crate::error::Error;
use crate::rng::rng_from;
use crate::voxel::{voxel_index, EditInstruction, PointCloud, View, VoxelAsset, PALETTE};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::Rng;

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = rng_from(seed);
    PointCloud::new((0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect())
}

fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let directed = |x: &PointCloud, y: &PointCloud| {
        x.points
            .iter()
            .map(|p| {
                y.points
                    .iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

#[test]
fn chamfer_examples() {
    let a = PointCloud::new(vec![[0.0; 3]]);
    let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
    assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
    let c = random_cloud(50, 1);
    assert_eq!(chamfer(&c, &c).unwrap(), 0.0);
    assert!(chamfer(&c, &PointCloud::new(vec![])).is_err());
}

#[test]
fn chamfer_matches_brute_force() {
    for s in 0..20 {
        let (a, b) = (random_cloud(50, 2 * s), random_cloud(37, 2 * s + 1));
        assert!((chamfer(&a, &b).unwrap() - brute_chamfer(&a, &b)).abs() <= 1e-9);
    }
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_scales(seed in 0u64..1000, n in 1usize..40, m in 1usize..40, k in 0.1f64..5.0) {
        let (a, b) = (random_cloud(n, seed), random_cloud(m, seed + 7919));
        let ab = chamfer(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ab - brute_chamfer(&a, &b)).abs() < 1e-9);
        let scale = |c: &PointCloud| PointCloud::new(c.points.iter().map(|p| [k * p[0], k * p[1], k * p[2]]).collect());
        prop_assert!((chamfer(&scale(&a), &scale(&b)).unwrap() - k * ab).abs() < 1e-9 * (1.0 + k));
    }

    #[test]
    fn f1_is_rigid_invariant(seed in 0u64..1000, angle in 0.0f64..6.3, tx in -1.0f64..1.0, tau in 0.01f64..0.5) {
        let (a, b) = (random_cloud(30, seed), random_cloud(30, seed + 1));
        let t = Similarity {
            rotation: *Rotation3::from_axis_angle(&Vector3::y_axis(), angle).matrix(),
            translation: Vector3::new(tx, 0.3, -0.2),
            scale: 1.0,
        };
        let f = f1_score(&a, &b, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let g = f1_score(&t.apply_cloud(&a), &t.apply_cloud(&b), tau).unwrap();
        // Rounding can move a distance across the threshold only in
        // measure-zero cases; compare hit counts loosely.
        prop_assert!((f - g).abs() < 0.05, "{} vs {}", f, g);
        prop_assert_eq!(f1_score(&a, &a, tau).unwrap(), 1.0);
    }
}

#[test]
fn f1_examples() {
    let x = random_cloud(40, 3);
    assert_eq!(f1_score(&x, &x, 0.05).unwrap(), 1.0);
    let far = PointCloud::new(x.points.iter().map(|p| [p[0] + 10.0, p[1], p[2]]).collect());
    assert_eq!(f1_score(&x, &far, 0.05).unwrap(), 0.0);
    // Half of pred sits on gt, half is 1.0 away; every gt point is covered.
    let gt = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]]);
    let pred = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, 1.0, 0.0]]);
    assert!((f1_score(&pred, &gt, 0.05).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(f1_score(&x, &x, 0.0).is_err());
}

#[test]
fn view_distance_of_a_recolored_voxel() {
    let (g, w) = (4, 8);
    let mut a = VoxelAsset::empty(g);
    a.set(voxel_index(1, 2, 1, g), Some(PALETTE[0]));
    let mut b = a.clone();
    b.set(voxel_index(1, 2, 1, g), Some(PALETTE[3]));
    assert_eq!(view_distance(&a, &a, w).unwrap(), 0.0);
    // The lone voxel covers (w/g)² pixels in every view.
    let delta: f64 = (0..3).map(|c| (f64::from(PALETTE[0][c]) - f64::from(PALETTE[3][c])).powi(2)).sum();
    let expect = ((w / g) * (w / g)) as f64 * delta / (3 * w * w) as f64;
    let d = view_distance(&a, &b, w).unwrap();
    assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
    assert_eq!(d, view_distance(&b, &a, w).unwrap());
    assert!(view_distance(&a, &VoxelAsset::empty(8), w).is_err());
}

fn anisotropic_cloud(seed: u64) -> PointCloud {
    let mut rng = rng_from(seed);
    PointCloud::new(
        (0..400)
            .map(|_| [0.5 * (rng.random::<f64>() - 0.5), 0.3 * (rng.random::<f64>() - 0.5), 0.12 * (rng.random::<f64>() - 0.5)])
            .collect(),
    )
}

#[test]
fn icp_identity() {
    let c = anisotropic_cloud(4);
    let r = icp_align(&c, &c, &IcpOptions::default()).unwrap();
    assert!(r.residual() < 1e-20);
    assert!((r.transform.rotation - Matrix3::identity()).abs().max() < 1e-9);
    assert!((r.transform.scale - 1.0).abs() < 1e-9);
}

#[test]
fn icp_recovers_a_similarity() {
    let src = anisotropic_cloud(5);
    let truth = Similarity {
        rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), 30f64.to_radians()).matrix(),
        translation: Vector3::new(0.1, 0.0, 0.0),
        scale: 1.2,
    };
    let dst = truth.apply_cloud(&src);
    let r = icp_align(&src, &dst, &IcpOptions::default()).unwrap();
    assert!((r.transform.rotation - truth.rotation).abs().max() < 1e-3, "{:?}", r.transform);
    assert!((r.transform.translation - truth.translation).abs().max() < 1e-3);
    assert!((r.transform.scale - truth.scale).abs() < 1e-3);
    assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn icp_rejects_degenerate_input() {
    let line = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
    let c = anisotropic_cloud(6);
    assert!(matches!(icp_align(&line, &c, &IcpOptions::default()), Err(Error::Contract(_))));
    assert!(icp_align(&c, &PointCloud::new(c.points[..3].to_vec()), &IcpOptions::default()).is_err());
}

#[test]
fn fit_similarity_is_exact_on_paired_points() {
    let src = anisotropic_cloud(7);
    let truth = Similarity {
        rotation: *Rotation3::from_euler_angles(0.3, -0.7, 1.1).matrix(),
        translation: Vector3::new(-0.2, 0.4, 0.05),
        scale: 0.8,
    };
    let dst = truth.apply_cloud(&src);
    let fit = fit_similarity(&src.points, &dst.points, true).unwrap();
    assert!((fit.rotation - truth.rotation).abs().max() < 1e-12);
    assert!((fit.scale - truth.scale).abs() < 1e-12);
}

fn records() -> Vec<EditPairRecord> {
    let instrs = [
        EditInstruction::Texture { slot: 0, color: 3 },
        EditInstruction::Removal { slot: 1 },
        EditInstruction::Texture { slot: 0, color: 5 },
    ];
    let mut out = Vec::new();
    for seed in 0..40u64 {
        for (k, instr) in instrs.iter().enumerate() {
            let split = if k == 2 { Split::UnseenAsset } else { Split::SeenUnseenEdit };
            if let Ok(r) = EditPairRecord::oracle(seed, *instr, 8, View::Front, 16, split) {
                if r.edited != r.source && r.edited.occupied_count() > 0 {
                    out.push(r);
                }
            }
        }
        if out.len() >= 12 {
            break;
        }
    }
    assert!(out.len() >= 6);
    out
}

fn cfg() -> BenchConfig {
    BenchConfig {
        points: 128,
        view_size: 16,
        ..BenchConfig::default()
    }
}

#[test]
fn no_edit_rules() {
    let recs = records();
    for r in &recs {
        let texture = r.category() == crate::voxel::Category::Texture;
        assert_eq!(is_no_edit(&r.source, &r.source, &r.edited, texture, 0.1), Some(true));
        assert_eq!(is_no_edit(&r.edited, &r.source, &r.edited, texture, 0.1), Some(false));
        assert_eq!(is_no_edit(&r.edited, &r.source, &r.source, texture, 0.1), None);
    }
    // Labeled sweep: predictions that carry out a fraction f of a recolor.
    let mut g = VoxelAsset::empty(4);
    let mut s = VoxelAsset::empty(4);
    for i in 0..20 {
        s.set(i, Some(PALETTE[0]));
        g.set(i, Some(PALETTE[1]));
    }
    let preds: Vec<VoxelAsset> = [0usize, 1, 2, 3, 10, 20]
        .iter()
        .map(|&k| {
            let mut p = s.clone();
            for i in 0..k {
                p.set(i, Some(PALETTE[1]));
            }
            p
        })
        .collect();
    let cases: Vec<NoEditCase<'_>> = preds.iter().map(|p| NoEditCase { pred: p, source: &s, gt: &g, texture: true }).collect();
    for (thr, want) in [(0.05, 1), (0.1, 2), (0.16, 4), (0.6, 5), (1.01, 6)] {
        let sum = no_edit_rate(&cases, thr);
        assert_eq!(sum.counted, want, "threshold {thr}");
        assert!((sum.rate - want as f64 / 6.0).abs() < 1e-15);
    }
    let mut with_empty = cases.clone();
    with_empty.push(NoEditCase { pred: &s, source: &s, gt: &s, texture: true });
    assert_eq!(no_edit_rate(&with_empty, 0.1).excluded, 1);
}

#[test]
fn ground_truth_self_evaluation() {
    let recs = records();
    let preds: Vec<_> = recs.iter().map(|r| Ok(r.edited.clone())).collect();
    let rep = evaluate_predictions(&recs, &preds, &cfg(), None).unwrap();
    for row in &rep.rows {
        assert_eq!(row.chamfer, Some(0.0));
        assert_eq!(row.f1, Some(1.0));
        assert_eq!(row.view_distance, Some(0.0));
        assert_eq!(row.no_edit, Some(false));
    }
    rep.verify().unwrap();
    let again = evaluate_predictions(&recs, &preds, &cfg(), None).unwrap();
    assert_eq!(rep.to_json(), again.to_json());
    assert_eq!(rep.rows_csv(), again.rows_csv());

    let src: Vec<_> = recs.iter().map(|r| Ok(r.source.clone())).collect();
    let rep = evaluate_predictions(&recs, &src, &cfg(), None).unwrap();
    assert_eq!(rep.overall().no_edit_rate, Some(1.0));
}

#[test]
fn failures_and_split_filter() {
    let recs = records();
    let mut preds: Vec<_> = recs.iter().map(|r| Ok(r.edited.clone())).collect();
    preds[0] = Err(Error::DegenerateOutput("empty".into()));
    preds[1] = Ok(VoxelAsset::empty(8));
    let rep = evaluate_predictions(&recs, &preds, &cfg(), None).unwrap();
    assert!(rep.rows[0].failed && rep.rows[1].failed);
    assert_eq!(rep.overall().failures, 2);
    assert!((rep.overall().failure_rate - 2.0 / recs.len() as f64).abs() < 1e-15);
    rep.verify().unwrap();

    let only = BenchConfig {
        splits: vec![Split::UnseenAsset],
        ..cfg()
    };
    let rep = evaluate_predictions(&recs, &preds, &only, None).unwrap();
    assert!(!rep.rows.is_empty());
    assert!(rep.rows.iter().all(|r| r.split == Split::UnseenAsset));
    let mut tampered = rep.clone();
    tampered.aggregates[0].count += 1;
    assert!(tampered.verify().is_err());
}

#[test]
fn icp_recovers_misposed_predictions() {
    let recs = records();
    let shifted: Vec<_> = recs
        .iter()
        .map(|r| {
            let g = r.edited.grid();
            let mut a = VoxelAsset::empty(g);
            for i in 0..r.edited.len() {
                if r.edited.is_occupied(i) {
                    let (x, y, z) = crate::voxel::voxel_coords(i, g);
                    if x + 1 < g {
                        a.set(voxel_index(x + 1, y, z, g), Some(r.edited.color(i)));
                    }
                }
            }
            Ok(a)
        })
        .collect();
    let plain = evaluate_predictions(&recs, &shifted, &cfg(), None).unwrap();
    let aligned = evaluate_predictions(&recs, &shifted, &BenchConfig { icp: true, ..cfg() }, None).unwrap();
    let (p, a) = (plain.overall().chamfer.unwrap(), aligned.overall().chamfer.unwrap());
    assert!(a < p, "{a} vs {p}");
}

#[test]
fn plot_data_has_one_line_per_aggregate() {
    let recs = records();
    let preds: Vec<_> = recs.iter().map(|r| Ok(r.edited.clone())).collect();
    let rep = evaluate_predictions(&recs, &preds, &cfg(), None).unwrap();
    let csv = plot_data(&[(500, &rep), (1000, &rep)]);
    assert_eq!(csv.lines().count(), 1 + 2 * rep.aggregates.len());
    assert!(csv.lines().nth(1).unwrap().starts_with("500,"));
}
