use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use siamtrack::config::Config;
use siamtrack::data::kitti::{encode_velodyne, parse_velodyne, Calib};
use siamtrack::geometry::{
    apply_motion, inverse_motion, iou3d, knn_coords, normalize_angle, resample_indices, Box7, PointCloud,
};
use siamtrack::metrics::{precision, success};
use siamtrack::numeric::{checkpoint, ParamStore, Tensor};
use siamtrack::train::relative_box;

fn coord() -> impl Strategy<Value = f64> {
    -20.0..20.0f64
}

fn boxes() -> impl Strategy<Value = Box7> {
    (
        (coord(), coord(), -3.0..3.0f64).prop_map(|(x, y, z)| [x, y, z]),
        [0.3..6.0f64, 0.3..6.0f64, 0.3..4.0f64],
        -PI..PI,
    )
        .prop_map(|(c, s, yaw)| Box7::new(c, s, yaw).unwrap())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn angles_land_in_half_open_interval(a in -100.0..100.0f64) {
        let n = normalize_angle(a);
        prop_assert!(n > -PI && n <= PI);
        prop_assert!(close(n.sin(), a.sin(), 1e-9) && close(n.cos(), a.cos(), 1e-9));
    }

    #[test]
    fn box_frame_round_trip(b in boxes(), p in [coord(), coord(), coord()]) {
        let back = b.to_world(b.to_local(p));
        for k in 0..3 {
            prop_assert!(close(back[k], p[k], 1e-12));
        }
    }

    #[test]
    fn motion_inverts(b in boxes(), dx in -2.0..2.0f64, dy in -2.0..2.0f64, dz in -1.0..1.0f64, dyaw in -1.0..1.0f64) {
        let moved = apply_motion(&b, dx, dy, dz, dyaw);
        let (ix, iy, iz, iyaw) = inverse_motion(dx, dy, dz, dyaw);
        let back = apply_motion(&moved, ix, iy, iz, iyaw);
        prop_assert!(back.center_distance(&b) < 1e-9);
        prop_assert!(normalize_angle(back.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn relative_box_matches_local_frame(b in boxes(), r in boxes()) {
        let rel = relative_box(&b, &r);
        let c = r.to_world(rel.center());
        prop_assert!(close(c[0], b.x, 1e-9) && close(c[1], b.y, 1e-9) && close(c[2], b.z, 1e-9));
        prop_assert!(normalize_angle(rel.yaw + r.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn iou_is_a_symmetric_fraction(a in boxes(), b in boxes()) {
        let ab = iou3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou3d(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(iou3d(&a, &a), 1.0);
    }

    #[test]
    fn iou_is_invariant_under_rigid_motion(a in boxes(), b in boxes(), t in [coord(), coord()], rot in -PI..PI) {
        let (c, s) = (rot.cos(), rot.sin());
        let mv = |x: &Box7| Box7::new(
            [c * x.x - s * x.y + t[0], s * x.x + c * x.y + t[1], x.z],
            x.size(),
            x.yaw + rot,
        ).unwrap();
        prop_assert!((iou3d(&a, &b) - iou3d(&mv(&a), &mv(&b))).abs() < 1e-9);
    }

    #[test]
    fn resampling_hits_the_target(n in 1usize..300, target in 1usize..300, seed in any::<u64>()) {
        let idx = resample_indices(n, target, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(idx.len(), target);
        prop_assert!(idx.iter().all(|&i| i < n));
        if n >= target {
            let mut u = idx.clone();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), target);
        }
    }

    #[test]
    fn knn_rows_start_at_self_and_grow(pts in prop::collection::vec([coord(), coord(), coord()], 2..80), k in 1usize..8) {
        let k = k.min(pts.len());
        let g = knn_coords(&pts, k).unwrap();
        for i in 0..pts.len() {
            prop_assert_eq!(g.row(i)[0], i);
            let d = &g.sq_dists[i * k..(i + 1) * k];
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn velodyne_round_trip(pts in prop::collection::vec([coord(), coord(), coord()], 1..50)) {
        // The format stores 32-bit floats.
        let pts: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| v as f32 as f64)).collect();
        let pc = PointCloud::new(pts).unwrap();
        let back = parse_velodyne(&encode_velodyne(&pc), Path::new("mem")).unwrap();
        prop_assert_eq!(back.coords, pc.coords);
    }

    #[test]
    fn checkpoint_round_trip(vals in prop::collection::vec(-1e6..1e6f64, 1..40)) {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[vals.len()], vals.clone()).unwrap()).unwrap();
        store.add("b.c", Tensor::new(&[1, vals.len()], vals).unwrap()).unwrap();
        let back: ParamStore<f64> = checkpoint::decode(&checkpoint::encode(&store), Path::new("mem")).unwrap();
        for ((_, x), (_, y)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(x.tensor.data(), y.tensor.data());
            prop_assert_eq!(x.tensor.shape(), y.tensor.shape());
        }
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 1usize..40) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::<f64>::zeros(&[3, 4])).unwrap();
        let bytes = checkpoint::encode(&store);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(checkpoint::decode::<f64>(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }

    #[test]
    fn label_round_trip_through_calibration(b in boxes()) {
        let calib = Calib::default();
        let back = calib.label_to_box(&calib.box_to_label(&b, 3, 7, "Car")).unwrap();
        prop_assert!(back.center_distance(&b) < 1e-9);
        prop_assert!(normalize_angle(back.yaw - b.yaw).abs() < 1e-9);
        prop_assert!(close(back.w, b.w, 1e-12) && close(back.l, b.l, 1e-12) && close(back.h, b.h, 1e-12));
    }

    #[test]
    fn metrics_are_bounded_and_order_free(
        ious in prop::collection::vec(0.0..=1.0f64, 1..60),
        dists in prop::collection::vec(0.0..5.0f64, 1..60),
    ) {
        let s = success(&ious).unwrap();
        let p = precision(&dists).unwrap();
        prop_assert!((0.0..=100.0).contains(&s) && (0.0..=100.0).contains(&p));
        let (mut ri, mut rd) = (ious.clone(), dists.clone());
        ri.reverse();
        rd.reverse();
        prop_assert!((success(&ri).unwrap() - s).abs() < 1e-9);
        prop_assert!((precision(&rd).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn config_text_round_trip(points in 48usize..112, k in 1usize..64, lr in 1e-6..1.0f64, ego in any::<bool>()) {
        let c = Config {
            template_points: points * 8,
            search_points: points * 16,
            ego_k: k,
            learning_rate: lr,
            ego,
            ..Config::default()
        };
        let text = c.to_toml();
        let back = Config::parse(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml(), text);
    }
}
