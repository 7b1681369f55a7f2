//! Lifting 2D detections to 3D with DLT and RANSAC.

use nalgebra::{DMatrix, Matrix4, Point2, Point3, RowVector4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraView;

/// One 2D detection of a point in one view.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub cam: &'a CameraView,
    pub p: Point2<f64>,
    pub confidence: f64,
}

impl<'a> Observation<'a> {
    pub fn new(cam: &'a CameraView, p: Point2<f64>, confidence: f64) -> Self {
        Self { cam, p, confidence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriangulationResult {
    pub point: Point3<f64>,
    pub inliers: Vec<bool>,
    /// RMS reprojection error over the inliers, in pixels.
    pub rms_reproj: f64,
}

impl TriangulationResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 5.0,
            iterations: 100,
        }
    }
}

/// Linear triangulation: the unit `X̃` minimizing `‖A X̃‖`, where each view
/// contributes the rows `x·m₃ − m₁` and `y·m₃ − m₂`, each scaled to unit norm.
///
/// The solve runs in a world frame centred on the mean finite camera center
/// and scaled by their RMS spread. Without this the translation column
/// dominates every row and the algebraic minimum drifts away from the
/// geometric one for points far from the world origin.
pub fn dlt_triangulate(obs: &[Observation<'_>]) -> Result<Point3<f64>> {
    if obs.len() < 2 {
        return Err(Error::TooFewObservations {
            needed: 2,
            got: obs.len(),
        });
    }
    let (origin, scale) = world_frame(obs);
    let mut frame = Matrix4::identity() * scale;
    frame.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin.coords);
    frame[(3, 3)] = 1.0;
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (i, o) in obs.iter().enumerate() {
        if !(o.p.x.is_finite() && o.p.y.is_finite()) {
            return Err(Error::InvalidArgument(format!("observation {i} is not finite")));
        }
        let m = o.cam.matrix() * frame;
        let m1: RowVector4<f64> = m.row(0).into_owned();
        let m2: RowVector4<f64> = m.row(1).into_owned();
        let m3: RowVector4<f64> = m.row(2).into_owned();
        for (j, row) in [m3 * o.p.x - m1, m3 * o.p.y - m2].into_iter().enumerate() {
            let n = row.norm();
            if n > 0.0 {
                a.set_row(2 * i + j, &(row / n));
            }
        }
    }
    // Smallest eigenvector of AᵀA equals the last right-singular vector of A.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let n = sv.len();
    if n < 4 || sv[2] - sv[3] <= 1e-9 * sv[0] {
        return Err(Error::Degenerate(
            "two smallest singular values coincide; solution is ambiguous".into(),
        ));
    }
    let x = v_t.row(order[3]);
    if x[3].abs() < 1e-15 * x.norm() {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    Ok(origin + Vector3::new(x[0], x[1], x[2]) * (scale / x[3]))
}

fn world_frame(obs: &[Observation<'_>]) -> (Point3<f64>, f64) {
    let centers: Vec<Point3<f64>> = obs.iter().filter_map(|o| o.cam.center_point()).collect();
    if centers.is_empty() {
        return (Point3::origin(), 1.0);
    }
    let n = centers.len() as f64;
    let mean = centers.iter().fold(Vector3::zeros(), |acc, c| acc + c.coords) / n;
    let spread = (centers.iter().map(|c| (c.coords - mean).norm_squared()).sum::<f64>() / n).sqrt();
    let scale = if spread > 0.0 && spread.is_finite() { spread } else { 1.0 };
    (Point3::from(mean), scale)
}

/// Distance between the projection of `x` and the observed pixel `p`.
pub fn reprojection_error(cam: &CameraView, x: &Point3<f64>, p: &Point2<f64>) -> Result<f64> {
    let proj = cam.project(x)?;
    if cam.depth(x) < 0.0 {
        return Err(Error::BehindCamera);
    }
    Ok((proj - p).norm())
}

fn consensus(obs: &[Observation<'_>], x: &Point3<f64>, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(obs.len());
    let mut sq = 0.0;
    let mut count = 0;
    for o in obs {
        match reprojection_error(o.cam, x, &o.p) {
            Ok(e) if e < threshold => {
                mask.push(true);
                sq += e * e;
                count += 1;
            }
            _ => mask.push(false),
        }
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
    (mask, count, rms)
}

/// Robust triangulation from two-view minimal samples.
///
/// Each iteration draws two distinct observations, triangulates them, and
/// counts observations reprojecting within `threshold_px`. The largest
/// consensus wins (ties go to the lower RMS, then the earlier iteration) and
/// the point is re-estimated by DLT over its inliers.
pub fn ransac_triangulate(
    obs: &[Observation<'_>],
    config: &RansacConfig,
    seed: u64,
) -> Result<TriangulationResult> {
    if obs.len() < 2 {
        return Err(Error::TooFewObservations {
            needed: 2,
            got: obs.len(),
        });
    }
    if !(config.threshold_px > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be positive, got {}",
            config.threshold_px
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<bool>, usize, f64)> = None;
    for _ in 0..config.iterations {
        let i = rng.random_range(0..obs.len());
        let mut j = rng.random_range(0..obs.len() - 1);
        if j >= i {
            j += 1;
        }
        let Ok(x) = dlt_triangulate(&[obs[i], obs[j]]) else {
            continue;
        };
        let candidate = consensus(obs, &x, config.threshold_px);
        let better = match &best {
            None => true,
            Some((_, n, rms)) => candidate.1 > *n || (candidate.1 == *n && candidate.2 < *rms),
        };
        if better {
            best = Some(candidate);
        }
    }
    let (inliers, count, _) = best.unwrap_or((vec![false; obs.len()], 0, f64::INFINITY));
    if count < 2 {
        return Err(Error::NoConsensus(count));
    }
    let selected: Vec<Observation<'_>> = obs
        .iter()
        .zip(&inliers)
        .filter(|(_, &keep)| keep)
        .map(|(o, _)| *o)
        .collect();
    let point = dlt_triangulate(&selected)?;
    let sq: f64 = selected
        .iter()
        .map(|o| {
            let e = o.cam.project(&point).map(|p| (p - o.p).norm()).unwrap_or(f64::INFINITY);
            e * e
        })
        .sum();
    Ok(TriangulationResult {
        point,
        inliers,
        rms_reproj: (sq / selected.len() as f64).sqrt(),
    })
}
