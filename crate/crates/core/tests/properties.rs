use nalgebra::{Rotation3, Vector2, Vector3};
use proptest::prelude::*;

use polyrigid::geometry::{build_intrinsics, source_position, CameraMatrix, CameraPose, IntrinsicMeta, Ray};
use polyrigid::grid::{euclidean_distance_transform, structure_masses, trilinear_sample, GridGeometry, LabelMap, Volume};
use polyrigid::io;
use polyrigid::liealg::{Twist, TwistMatrix};
use polyrigid::render::{render_ray, DetectorImage, QuadratureSpec};
use polyrigid::similarity::{dice, gmncc, hd95, local_ncc, ncc, PatchSpec};
use polyrigid::warpfield::{build_weights, WeightMode};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn pose() -> impl Strategy<Value = CameraPose> {
    (vec3(1.0), 0.0..std::f64::consts::PI, vec3(50.0)).prop_filter_map("axis", |(axis, angle, t)| {
        let axis = nalgebra::Unit::try_new(axis, 1e-3)?;
        let r = Rotation3::from_axis_angle(&axis, angle);
        CameraPose::new(*r.matrix(), t + Vector3::new(0.0, 0.0, 1000.0)).ok()
    })
}

fn meta() -> impl Strategy<Value = IntrinsicMeta> {
    (500.0..2000.0f64, vec3(20.0), 0.5..3.0f64, 0.5..3.0f64, 8usize..200, 8usize..200)
        .prop_map(|(f, o, sx, sy, h, w)| IntrinsicMeta::new(f, [o.x, o.y], [sx, sy], [h, w]).unwrap())
}

fn mask(len: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), len)
}

fn image(h: usize, w: usize) -> impl Strategy<Value = DetectorImage> {
    prop::collection::vec(0.0..1.0f64, h * w).prop_map(move |px| DetectorImage::new(h, w, px).unwrap())
}

/// Three-structure label map on a small grid with random blob placement.
fn labels() -> impl Strategy<Value = LabelMap> {
    prop::collection::vec((0usize..10, 0usize..10, 0usize..10, 1usize..4), 3).prop_map(|blobs| {
        let g = GridGeometry::centered([10, 10, 10], 1.5).unwrap();
        let mut data = vec![0u16; g.len()];
        for (k, (x, y, z, r)) in blobs.into_iter().enumerate() {
            for (i, label) in data.iter_mut().enumerate() {
                let c = g.coords(i);
                let d = [c[0].abs_diff(x), c[1].abs_diff(y), c[2].abs_diff(z)];
                if d.iter().all(|&v| v < r) && *label == 0 {
                    *label = k as u16 + 1;
                }
            }
        }
        LabelMap::new(g, data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_round_trips_detector_points(pose in pose(), meta in meta(), u in 0.0..1.0f64, v in 0.0..1.0f64) {
        let cam = CameraMatrix::from_meta(&meta, pose).unwrap();
        let p = Vector2::new(u * meta.width() as f64, v * meta.height() as f64);
        let back = cam.project(&cam.detector_point(&p).unwrap()).unwrap();
        prop_assert!((back - p).norm() < 1e-6, "{p} -> {back}");
    }

    #[test]
    fn source_ignores_intrinsics(pose in pose(), a in meta(), b in meta()) {
        let sa = CameraMatrix::from_meta(&a, pose).unwrap().source();
        let sb = CameraMatrix::from_meta(&b, pose).unwrap().source();
        prop_assert!((sa - sb).norm() < 1e-6);
        prop_assert!((sa - source_position(&pose)).norm() < 1e-6);
    }

    #[test]
    fn intrinsics_scale_with_focal_length(meta in meta()) {
        let doubled = IntrinsicMeta::new(2.0 * meta.focal_length, meta.optical_center, meta.pixel_spacing, meta.image_size).unwrap();
        let (k1, k2) = (build_intrinsics(&meta).unwrap(), build_intrinsics(&doubled).unwrap());
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            prop_assert!((k2[(r, c)] - 2.0 * k1[(r, c)]).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_transform_is_lipschitz(m in mask(6 * 5 * 4), sx in 0.5..2.0f64, sy in 0.5..2.0f64, sz in 0.5..2.0f64) {
        prop_assume!(m.contains(&true));
        let shape = [6, 5, 4];
        let spacing = [sx, sy, sz];
        let d = euclidean_distance_transform(&m, shape, spacing);
        let idx = |x: usize, y: usize, z: usize| x + 6 * (y + 5 * z);
        for z in 0..4 { for y in 0..5 { for x in 0..6 {
            let here = d[idx(x, y, z)];
            prop_assert_eq!(here == 0.0, m[idx(x, y, z)]);
            if x + 1 < 6 { prop_assert!((here - d[idx(x + 1, y, z)]).abs() <= sx + 1e-12); }
            if y + 1 < 5 { prop_assert!((here - d[idx(x, y + 1, z)]).abs() <= sy + 1e-12); }
            if z + 1 < 4 { prop_assert!((here - d[idx(x, y, z + 1)]).abs() <= sz + 1e-12); }
        }}}
    }

    #[test]
    fn trilinear_sampling_is_continuous_across_faces(data in prop::collection::vec(0.0..1.0f64, 64), p in vec3(5.0), axis in 0usize..3) {
        let g = GridGeometry::centered([4, 4, 4], 2.0).unwrap();
        let vol = Volume::new(g, data).unwrap();
        // Snap one coordinate onto a voxel face plane.
        let mut q = p;
        q[axis] = (q[axis] / 2.0).round() * 2.0;
        let mut lo = q;
        let mut hi = q;
        lo[axis] -= 1e-9;
        hi[axis] += 1e-9;
        prop_assert!((trilinear_sample(&vol, &lo) - trilinear_sample(&vol, &hi)).abs() < 1e-6);
    }

    #[test]
    fn masses_are_normalized(labels in labels()) {
        prop_assume!(!labels.structure_ids().is_empty());
        let m = structure_masses(&labels).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weight_rows_are_convex(labels in labels(), eps in 1e-3..1.0f64, mass in any::<bool>()) {
        let ids = labels.structure_ids();
        prop_assume!(ids.len() >= 2);
        let vol = Volume::zeros(*labels.geometry());
        let mode = if mass { WeightMode::Mass } else { WeightMode::Reciprocal { epsilon: eps } };
        let w = build_weights(&labels, &vol, mode).unwrap();
        for i in 0..labels.geometry().len() {
            let row = w.row(i);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rendering_is_linear(
        a in prop::collection::vec(0.0..1.0f64, 512),
        b in prop::collection::vec(0.0..1.0f64, 512),
        s in 0.0..3.0f64,
        t in 0.0..3.0f64,
        from in vec3(300.0),
        to in vec3(10.0),
    ) {
        let g = GridGeometry::centered([8, 8, 8], 3.0).unwrap();
        let (va, vb) = (Volume::new(g, a).unwrap(), Volume::new(g, b).unwrap());
        let combo = va.linear_combination(s, &vb, t).unwrap();
        prop_assume!((from - to).norm() > 1.0);
        let ray = Ray::new(from, to + (to - from)).unwrap();
        let q = QuadratureSpec::new(64).unwrap();
        let lhs = render_ray(&combo, &ray, &q);
        let rhs = s * render_ray(&va, &ray, &q) + t * render_ray(&vb, &ray, &q);
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn ncc_family_is_bounded_and_self_similar(a in image(26, 26), b in image(26, 26)) {
        let p = PatchSpec::default();
        for s in [ncc(&a, &b).unwrap(), local_ncc(&a, &b, &p).unwrap(), gmncc(&a, &b, &p).unwrap()] {
            prop_assert!((-1.0..=1.0).contains(&s.value));
        }
        prop_assert!((gmncc(&a, &a, &p).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gmncc_ignores_positive_affine_rescaling(a in image(26, 26), b in image(26, 26), scale in 0.1..10.0f64, offset in -5.0..5.0f64) {
        let p = PatchSpec::default();
        let base = gmncc(&a, &b, &p).unwrap().value;
        let scaled_b = b.map(|x| scale * x + offset);
        let scaled_a = a.map(|x| scale * x + offset);
        prop_assert!((gmncc(&a, &scaled_b, &p).unwrap().value - base).abs() < 1e-9);
        prop_assert!((gmncc(&scaled_a, &b, &p).unwrap().value - base).abs() < 1e-9);
    }

    #[test]
    fn overlap_metrics_are_symmetric(a in mask(8 * 7 * 3), b in mask(8 * 7 * 3)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assume!(a.contains(&true) && b.contains(&true));
        let shape = [8, 7, 3];
        let spacing = [1.0, 1.25, 2.0];
        prop_assert_eq!(hd95(&a, &b, shape, spacing).unwrap(), hd95(&b, &a, shape, spacing).unwrap());
    }

    #[test]
    fn volumes_round_trip_bytes(data in prop::collection::vec(0.0..10.0f32, 60)) {
        let g = GridGeometry::centered([5, 4, 3], 1.5).unwrap();
        let vol = Volume::new(g, data.iter().map(|&x| x as f64).collect()).unwrap();
        let bytes = io::encode_volume(&vol).unwrap();
        prop_assert_eq!(io::encode_volume(&io::decode_volume(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn twist_files_round_trip(rows in prop::collection::vec((vec3(1.5), vec3(50.0)), 1..5)) {
        // Rotation parts stay on the canonical branch, |omega| < pi.
        let twists = TwistMatrix::new(rows.iter().map(|(w, u)| Twist::new(*w, *u)).collect());
        let parsed = io::parse_twists(&io::encode_twists(&twists)).unwrap();
        prop_assert_eq!(parsed.to_arrays(), twists.to_arrays());
    }
}
