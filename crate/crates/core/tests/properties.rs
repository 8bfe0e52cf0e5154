mod common;

use std::f64::consts::PI;

use common::brute_force_min;
use fusionpos::assignment::{solve_km, CostMatrix};
use fusionpos::channel::{csi_to_real, real_to_csi, CsiMatrix};
use fusionpos::eval::{EvalReport, Method};
use fusionpos::geometry::{pixel_to_polar, polar_to_world, world_to_pixel, wrap_angle, CameraConfig, PixelCoord, WorldCoord2D};
use fusionpos::metatrain::{rectify_weights, weights_for, LrSchedule, UnlabeledBatch, Weighting};
use fusionpos::scenario::fuse_detections;
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

fn camera(yaw: f64) -> CameraConfig {
    CameraConfig {
        mount_position: WorldCoord2D::new(10.0, -5.0),
        yaw,
        axis_polar: 60f64.to_radians(),
        fov_azimuth: 70f64.to_radians(),
        fov_elevation: 56f64.to_radians(),
        image_width: 1280,
        image_height: 720,
        mount_height_delta: 6.0,
    }
}

fn cost_matrix() -> impl Strategy<Value = CostMatrix> {
    (1usize..=6).prop_flat_map(|rows| {
        (0..=rows).prop_flat_map(move |cols| {
            prop::collection::vec(prop::collection::vec(0.0f64..50.0, cols), rows)
                .prop_map(|m| CostMatrix::from_rows(&m).unwrap())
        })
    })
}

proptest! {
    #[test]
    fn pixel_world_round_trip(u in 0.0f64..1280.0, v in 0.0f64..720.0, yaw in -PI..PI) {
        let cam = camera(yaw);
        let p = PixelCoord { u, v };
        let w = polar_to_world(pixel_to_polar(p, &cam).unwrap(), &cam).unwrap();
        let back = world_to_pixel(w, &cam).unwrap();
        prop_assert!((back.u - u).abs() < 1e-6 && (back.v - v).abs() < 1e-6, "{:?} -> {:?}", p, back);
    }

    #[test]
    fn wrapped_angles_are_canonical(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let k = (a - w) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn km_is_feasible_and_optimal(c in cost_matrix()) {
        let a = solve_km(&c).unwrap();
        let mut used = vec![0; c.n_cols];
        for v in &a {
            if let Some(j) = v.slot { used[j] += 1; }
        }
        prop_assert!(used.iter().all(|&n| n == 1));
        let best = brute_force_min(&c);
        prop_assert!((c.total(&a) - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn km_optimum_scales_with_the_costs(c in cost_matrix(), s in 0.01f64..100.0) {
        let scaled = CostMatrix { entries: c.entries.iter().map(|v| v * s).collect(), ..c.clone() };
        let a = solve_km(&scaled).unwrap();
        let best = brute_force_min(&c);
        prop_assert!((c.total(&a) - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn rectified_weights_stay_in_range(raw in prop::collection::vec(-1e3f64..1e3, 1..40), xi in 0.0f64..=1.0) {
        let w = rectify_weights(&raw, xi);
        for v in &w.rectified {
            prop_assert!(*v >= 1.0 - xi - 1e-12 && *v <= 1.0 + xi + 1e-12);
        }
        let matched = vec![true; raw.len()];
        let relu = weights_for(Weighting::Relu, &raw, &matched, xi);
        prop_assert!(relu.iter().all(|v| *v >= 0.0));
        if raw.iter().any(|v| *v > 0.0) {
            let mean = relu.iter().sum::<f64>() / relu.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_is_idempotent(pts in prop::collection::vec((0.0f64..30.0, -5.0f64..5.0), 0..12), r in 0.1f64..3.0) {
        let points: Vec<WorldCoord2D> = pts.iter().map(|&(x, y)| WorldCoord2D::new(x, y)).collect();
        let once: Vec<WorldCoord2D> = fuse_detections(&points, r).into_iter().map(|c| c.0).collect();
        let twice: Vec<WorldCoord2D> = fuse_detections(&once, r).into_iter().map(|c| c.0).collect();
        prop_assert_eq!(&once, &twice);
        let mut members: Vec<usize> = fuse_detections(&points, r).into_iter().flat_map(|c| c.1).collect();
        members.sort_unstable();
        prop_assert_eq!(members, (0..points.len()).collect::<Vec<_>>());
    }

    #[test]
    fn csi_real_layout_round_trips(vals in prop::collection::vec(-10.0f64..10.0, 2 * 3 * 5)) {
        let m = CsiMatrix { entries: DMatrix::from_fn(3, 5, |i, j| Complex64::new(vals[2 * (i * 5 + j)], vals[2 * (i * 5 + j) + 1])) };
        prop_assert_eq!(real_to_csi(&csi_to_real(&m)), m);
    }

    #[test]
    fn unit_weight_coefficients_average_over_snapshots(groups in prop::collection::vec((0usize..4, any::<bool>()), 1..30)) {
        let mut b = UnlabeledBatch::empty(4);
        let x = csi_to_real(&CsiMatrix::zeros(1, 1));
        for &(g, m) in &groups {
            b.push(x.clone(), WorldCoord2D::new(0.0, 0.0), m, g);
        }
        let c = b.coefficients(&vec![1.0; groups.len()]);
        let live = (0..4).filter(|g| groups.iter().any(|&(h, m)| h == *g && m)).count();
        prop_assert!((c.iter().sum::<f64>() - live as f64 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_never_increases(initial in 1e-6f64..1.0, factor in 0.1f64..1.0, period in 1usize..50, start in 0usize..100) {
        let s = LrSchedule { initial, factor, period, start };
        for t in 1..400 {
            prop_assert!(s.rate(t + 1) <= s.rate(t));
        }
    }

    #[test]
    fn report_mean_equals_cdf_mean(errs in prop::collection::vec((0usize..2, 0.0f64..50.0), 1..60)) {
        let r = EvalReport::from_errors(Method::BaselineA, 2, &errs, None);
        prop_assert!(r.cdf.windows(2).all(|w| w[0] <= w[1]));
        let direct = errs.iter().map(|e| e.1).sum::<f64>() / errs.len() as f64;
        prop_assert!((r.mean_error - direct).abs() <= 1e-12 * direct.max(1.0));
        prop_assert_eq!(r.cdf_at(f64::INFINITY), 1.0);
    }
}
