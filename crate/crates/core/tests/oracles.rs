//! Worked examples checked end to end through the public API.

use epitrans::fusion::{transformer_forward, FusionParams, ForwardOptions, WeightMode};
use epitrans::geometry::CameraView;
use epitrans::sampler::{bilinear_sample, FeatureMap, SamplerGeometry};
use epitrans::synth::look_at_origin;
use epitrans::triangulation::{
    dlt_triangulate, ransac_triangulate, reprojection_error, Observation, RansacConfig,
};
use epitrans::Error;
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `K [I | −t]` with square pixels.
fn pinhole(f: f64, cx: f64, cy: f64, t: Vector3<f64>, size: u32) -> CameraView {
    let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::identity();
    rt.set_column(3, &-t);
    CameraView::new(k * rt, size, size).unwrap()
}

fn stereo(size: u32, source_cy: f64) -> (CameraView, CameraView) {
    let c = (size - 1) as f64 / 2.0;
    (
        pinhole(10.0, c, c, Vector3::zeros(), size),
        pinhole(10.0, c, source_cy, Vector3::new(1.0, 0.0, 0.0), size),
    )
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn rectified_rows_are_sampled_end_to_end() {
    let (a, b) = stereo(10, 4.5);
    let geo = SamplerGeometry::new(a, b).unwrap();
    let map = FeatureMap::from_fn(10, 10, 1, |y, x, _| (10 * y + x) as f64).unwrap();
    let set = geo.sample(&map, &Point2::new(6.0, 5.0), 4).unwrap();
    let xs: Vec<f64> = set.locations.iter().map(|p| p.x).collect();
    assert_eq!(xs, [0.0, 3.0, 6.0, 9.0]);
    for (i, p) in set.locations.iter().enumerate() {
        assert!((p.y - 5.0).abs() < 1e-12);
        assert!((set.feature(i)[0] - (50.0 + p.x)).abs() < 1e-12);
    }
}

#[test]
fn rectified_depth_matches_disparity() {
    let (f, baseline) = (800.0, 120.0);
    let a = pinhole(f, 320.0, 240.0, Vector3::zeros(), 640);
    let b = pinhole(f, 320.0, 240.0, Vector3::new(baseline, 0.0, 0.0), 640);
    let (xl, xr, y) = (350.0, 302.0, 260.0);
    let x = dlt_triangulate(&[
        Observation::new(&a, Point2::new(xl, y), 1.0),
        Observation::new(&b, Point2::new(xr, y), 1.0),
    ])
    .unwrap();
    assert!((x.z - f * baseline / (xl - xr)).abs() < 1e-9);
}

#[test]
fn four_views_recover_a_point_exactly() {
    let target = Point3::new(100.0, -50.0, 2000.0);
    let cams: Vec<CameraView> = (0..4)
        .map(|i| {
            let az = 0.4 * i as f64;
            look_at_origin(&Point3::new(4000.0 * az.sin(), -300.0, 4000.0 * az.cos() + 2000.0), 600.0, (640, 480))
                .unwrap()
        })
        .collect();
    let obs: Vec<_> = cams.iter().map(|c| Observation::new(c, c.project(&target).unwrap(), 1.0)).collect();
    assert!((dlt_triangulate(&obs).unwrap() - target).norm() < 1e-6);

    let same = [obs[0], obs[0]];
    assert!(matches!(dlt_triangulate(&same), Err(Error::Degenerate(_))));

    let p = cams[1].project(&target).unwrap();
    assert_eq!(reprojection_error(&cams[1], &target, &p).unwrap(), 0.0);
    let off = reprojection_error(&cams[1], &target, &(p + nalgebra::Vector2::new(3.0, 4.0))).unwrap();
    assert!((off - 5.0).abs() < 1e-12);
}

#[test]
fn ransac_drops_two_corrupted_views() {
    let target = Point3::new(30.0, 80.0, -20.0);
    let cams: Vec<CameraView> = (0..10)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / 10.0;
            look_at_origin(&Point3::new(3000.0 * az.sin(), 0.0, 3000.0 * az.cos()), 500.0, (640, 480)).unwrap()
        })
        .collect();
    let mut obs: Vec<_> = cams.iter().map(|c| Observation::new(c, c.project(&target).unwrap(), 1.0)).collect();
    for o in &mut obs[3..5] {
        o.p.x += 50.0;
    }
    let r = ransac_triangulate(&obs, &RansacConfig::default(), 3).unwrap();
    let expected: Vec<bool> = (0..10).map(|i| !(3..5).contains(&i)).collect();
    assert_eq!(r.inliers, expected);
    assert!((r.point - target).norm() < 1e-6);
}

#[test]
fn zero_residual_and_universal_skip_pass_the_reference_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reference = random_map(&mut rng, 10, 10, 3);
    let source = random_map(&mut rng, 10, 10, 3);
    let zero = FusionParams::identity(WeightMode::Softmax, DMatrix::zeros(3, 3)).unwrap();
    let random = FusionParams::identity(WeightMode::Softmax, DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)))
        .unwrap();

    let (a, b) = stereo(10, 4.5);
    let out = transformer_forward(&reference, &source, &a, &b, &zero, 8, ForwardOptions::default()).unwrap();
    assert_eq!(out.fused, reference);

    // Every epipolar line lands a thousand rows below the source image.
    let (a, far) = stereo(10, 1004.5);
    let out = transformer_forward(&reference, &source, &a, &far, &random, 8, ForwardOptions::default()).unwrap();
    assert_eq!(out.fused, reference);
}

#[test]
fn backward_at_zero_weights_has_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w, c, k) = (10, 10, 3, 4);
    let reference = random_map(&mut rng, h, w, c);
    let source = random_map(&mut rng, h, w, c);
    let params = FusionParams::identity(WeightMode::Softmax, DMatrix::zeros(c, c)).unwrap();
    let (a, b) = stereo(10, 4.5);
    let opts = ForwardOptions {
        record_weights: true,
        record_state: true,
    };
    let out = transformer_forward(&reference, &source, &a, &b, &params, k, opts).unwrap();
    let ones = FeatureMap::from_fn(h, w, c, |_, _, _| 1.0).unwrap();
    let grads = out.backward(&ones).unwrap();

    assert!(grads.reference.iter().all(|&g| g == 1.0));

    let mut agg_sum = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let rec = out.record(x, y).expect("every rectified query has samples");
            for (loc, wt) in rec.locations.iter().zip(&rec.weights) {
                for (s, v) in agg_sum.iter_mut().zip(bilinear_sample(&source, loc)) {
                    *s += wt * v;
                }
            }
        }
    }
    for i in 0..c {
        for j in 0..c {
            assert!((grads.w_z[(i, j)] - agg_sum[j]).abs() < 1e-9, "dW_z[{i},{j}]");
        }
    }
}

#[test]
fn unsampled_source_pixels_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (h, w, c) = (10, 10, 2);
    let reference = random_map(&mut rng, h, w, c);
    let source = random_map(&mut rng, h, w, c);
    let params = FusionParams::identity(WeightMode::Softmax, DMatrix::from_fn(c, c, |_, _| rng.random_range(-1.0..1.0)))
        .unwrap();
    let (a, b) = stereo(10, 4.5);
    let opts = ForwardOptions {
        record_state: true,
        ..Default::default()
    };
    let out = transformer_forward(&reference, &source, &a, &b, &params, 4, opts).unwrap();
    let grad_out = random_map(&mut rng, h, w, c);
    let grads = out.backward(&grad_out).unwrap();
    // Samples fall on columns 0, 3, 6 and 9 only.
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let g = grads.source[(y * w + x) * c + ch];
                if [0, 3, 6, 9].contains(&x) {
                    assert_ne!(g, 0.0, "({x},{y})");
                } else {
                    assert_eq!(g, 0.0, "({x},{y})");
                }
            }
        }
    }
}
