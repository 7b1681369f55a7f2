//! Synthetic multi-view rigs and scenes with exact ground truth, and the
//! end-to-end harness that runs sampling, fusion, readout and triangulation
//! on them.
//!
//! Feature maps are rendered from per-joint unit descriptors: every joint
//! paints its descriptor into the map as a Gaussian bump at its projection.
//! Because descriptors are nearly orthogonal, the dot product of a fused map
//! with descriptor `j` acts as a heatmap for joint `j`, standing in for a
//! trained detector head.

use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{attend, transformer_forward, ForwardOptions, FusionParams};
use crate::geometry::{camera_for_resolution, CameraView};
use crate::metrics::{argmax_peak, jdr, Heatmap};
use crate::sampler::{bilinear_sample, FeatureMap, SamplerGeometry};
use crate::triangulation::{dlt_triangulate, ransac_triangulate, Observation, RansacConfig};

/// Cameras plus the pairwise angles between their optical axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub cameras: Vec<CameraView>,
    /// `angles[i][j]` in degrees.
    pub angles: Vec<Vec<f64>>,
}

impl Rig {
    pub fn from_cameras(cameras: Vec<CameraView>) -> Self {
        let axes: Vec<Vector3<f64>> = cameras.iter().map(optical_axis).collect();
        let angles = axes
            .iter()
            .map(|a| axes.iter().map(|b| angle_between(a, b)).collect())
            .collect();
        Self { cameras, angles }
    }

    /// The camera whose axis angle to `view` is closest to `target_deg`
    /// (ties go to the lower index).
    pub fn source_for(&self, view: usize, target_deg: f64) -> Option<usize> {
        (0..self.cameras.len())
            .filter(|&u| u != view)
            .min_by(|&a, &b| {
                let da = (self.angles[view][a] - target_deg).abs();
                let db = (self.angles[view][b] - target_deg).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
    }
}

/// Unit viewing direction of a finite camera.
pub fn optical_axis(cam: &CameraView) -> Vector3<f64> {
    let m = cam.matrix();
    let det = m.fixed_view::<3, 3>(0, 0).determinant();
    Vector3::new(m[(2, 0)], m[(2, 1)], m[(2, 2)]).normalize() * det.signum()
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 keeps precision for nearly parallel axes.
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Pinhole camera at `center` looking at the origin, principal point at the
/// image center, image `y` pointing toward world `−y`.
pub fn look_at_origin(center: &Point3<f64>, focal_px: f64, image_wh: (u32, u32)) -> Result<CameraView> {
    let z = (-center.coords).normalize();
    let down = Vector3::new(0.0, -1.0, 0.0);
    let x = down.cross(&z);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidArgument("camera axis is parallel to the world up direction".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * center.coords);
    let cx = (f64::from(image_wh.0) - 1.0) / 2.0;
    let cy = (f64::from(image_wh.1) - 1.0) / 2.0;
    let k = Matrix3::new(focal_px, 0.0, cx, 0.0, focal_px, cy, 0.0, 0.0, 1.0);
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    rt.set_column(3, &t);
    CameraView::new(k * rt, image_wh.0, image_wh.1)
}

/// `n` cameras on a horizontal circle of `radius_mm` around the origin, with
/// consecutive optical axes `angle_deg` apart. The seed picks the azimuth of
/// the first camera.
pub fn make_rig(
    n: usize,
    angle_deg: f64,
    radius_mm: f64,
    image_wh: (u32, u32),
    focal_px: f64,
    seed: u64,
) -> Result<Rig> {
    if !(angle_deg > 0.0 && angle_deg < 180.0) {
        return Err(Error::InvalidAngle(angle_deg));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a rig needs at least 2 cameras, got {n}")));
    }
    if !(radius_mm > 0.0 && focal_px > 0.0) {
        return Err(Error::InvalidArgument("radius and focal length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: f64 = rng.random_range(0.0..360.0);
    let cameras = (0..n)
        .map(|i| {
            let az = (start + angle_deg * i as f64).to_radians();
            let center = Point3::new(radius_mm * az.sin(), 0.0, radius_mm * az.cos());
            look_at_origin(&center, focal_px, image_wh)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Rig::from_cameras(cameras))
}

/// Ground-truth joints and their unit descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub joints: Vec<Point3<f64>>,
    pub descriptors: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Scene {
    pub fn channels(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }
}

/// Draws at most this many candidates per descriptor.
const DESCRIPTOR_DRAWS: usize = 1000;
/// Largest allowed dot product between two descriptors.
const MAX_DESCRIPTOR_DOT: f64 = 0.5;

/// `joints` uniform in a cube of side `extent_mm` centered at the origin, each
/// with a random unit descriptor whose dot product with every other is below
/// 0.5.
pub fn make_scene(joints: usize, extent_mm: f64, channels: usize, seed: u64) -> Result<Scene> {
    if joints == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one joint".into()));
    }
    if channels < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 channels, got {channels}")));
    }
    if !(extent_mm > 0.0) {
        return Err(Error::InvalidArgument("extent must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = extent_mm / 2.0;
    let points = (0..joints)
        .map(|_| {
            Point3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            )
        })
        .collect();
    let mut descriptors: Vec<Vec<f64>> = Vec::with_capacity(joints);
    for _ in 0..joints {
        let accepted = (0..DESCRIPTOR_DRAWS).find_map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            descriptors
                .iter()
                .all(|d| dot(d, &v) < MAX_DESCRIPTOR_DOT)
                .then_some(v)
        });
        match accepted {
            Some(v) => descriptors.push(v),
            None => return Err(Error::DescriptorSaturation { joints, channels }),
        }
    }
    Ok(Scene {
        joints: points,
        descriptors,
        seed,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects every joint to map pixels; `None` for joints behind the camera.
fn map_projections(cam: &CameraView, scene: &Scene, map_wh: (usize, usize)) -> Result<Vec<Option<Point2<f64>>>> {
    let map_cam = camera_for_resolution(cam, map_wh.0 as u32, map_wh.1 as u32)?;
    Ok(scene
        .joints
        .iter()
        .map(|x| {
            if map_cam.depth(x) <= 0.0 {
                None
            } else {
                map_cam.project(x).ok()
            }
        })
        .collect())
}

/// `F(x, y) = Σⱼ dⱼ·exp(−‖(x, y) − πⱼ‖² / 2σ²)` with `πⱼ` the projection of
/// joint `j` at map resolution. `map_wh` is `(width, height)`.
pub fn render_descriptor_map(
    cam: &CameraView,
    scene: &Scene,
    sigma_px: f64,
    map_wh: (usize, usize),
) -> Result<FeatureMap> {
    if !(sigma_px > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma_px}")));
    }
    let (w, h) = map_wh;
    let c = scene.channels();
    let centers = map_projections(cam, scene, map_wh)?;
    let denom = 2.0 * sigma_px * sigma_px;
    let mut data = vec![0.0; w * h * c];
    for (center, d) in centers.iter().zip(&scene.descriptors) {
        let Some(center) = center else { continue };
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - center.x;
                let dy = y as f64 - center.y;
                let g = (-(dx * dx + dy * dy) / denom).exp();
                if g == 0.0 {
                    continue;
                }
                let o = (y * w + x) * c;
                for (v, dj) in data[o..o + c].iter_mut().zip(d) {
                    *v += g * dj;
                }
            }
        }
    }
    FeatureMap::new(h, w, c, data)
}

/// Harness settings beyond the rig, scene and fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    /// Standard deviation of Gaussian noise added to 2D detections, image pixels.
    pub noise_px: f64,
    pub seed: u64,
    /// Gaussian width of rendered descriptors, map pixels.
    pub sigma_px: f64,
    /// Feature-map `(width, height)`.
    pub map_wh: (usize, usize),
    /// Source views are chosen closest to this axis separation.
    pub target_angle_deg: f64,
    /// Image pixels; JDR counts detections closer than half of it.
    pub head_size_px: f64,
    pub ransac: RansacConfig,
    /// Reference view whose per-joint similarity profiles go into the report.
    pub profile_view: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: crate::sampler::DEFAULT_SAMPLES,
            noise_px: 0.0,
            seed: 0,
            sigma_px: 1.5,
            map_wh: (128, 128),
            target_angle_deg: 24.0,
            head_size_px: 20.0,
            ransac: RansacConfig::default(),
            profile_view: 0,
        }
    }
}

/// One sample along an epipolar line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    /// Position along the visible segment in `[0, 1]`.
    pub t: f64,
    /// Source feature-map pixel.
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    /// Similarity score before normalization.
    pub dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointProfile {
    pub joint: usize,
    pub reference_view: usize,
    pub source_view: usize,
    /// Where the joint actually projects in the source map.
    pub truth: Option<[f64; 2]>,
    /// Empty when the query was skipped or the joint is not visible.
    pub rows: Vec<ProfileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointReport {
    pub joint: usize,
    pub views: usize,
    pub inliers: usize,
    /// `None` when the joint could not be triangulated.
    pub error_mm: Option<f64>,
    pub analytic_error_mm: Option<f64>,
}

/// Outcome of one harness run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    /// Over successfully triangulated joints, from heatmap readout.
    pub mpjpe_mm: f64,
    /// Same, from exact projections plus detection noise.
    pub analytic_mpjpe_mm: f64,
    pub jdr_pct: f64,
    /// Fraction of (view, joint) queries whose highest attention weight lies
    /// within one sample step of the true correspondence.
    pub matching_accuracy: f64,
    pub matched: usize,
    pub match_queries: usize,
    pub triangulated: usize,
    pub source_views: Vec<usize>,
    pub per_joint: Vec<JointReport>,
    pub profiles: Vec<JointProfile>,
}

/// Everything a run computes, including the maps.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    pub feature_maps: Vec<FeatureMap>,
    pub fused_maps: Vec<FeatureMap>,
}

fn image_from_map(p: &Point2<f64>, cam: &CameraView, map_wh: (usize, usize)) -> Point2<f64> {
    let sx = f64::from(cam.width()) / map_wh.0 as f64;
    let sy = f64::from(cam.height()) / map_wh.1 as f64;
    Point2::new(sx * p.x + (sx - 1.0) / 2.0, sy * p.y + (sy - 1.0) / 2.0)
}

fn visible(cam: &CameraView, x: &Point3<f64>) -> Option<Point2<f64>> {
    if cam.depth(x) <= 0.0 {
        return None;
    }
    cam.project(x).ok().filter(|p| cam.contains(p))
}

/// Attention profile of joint `joint` from `reference_view` into `source_view`.
/// The query is the joint's exact sub-pixel projection in the reference map.
pub fn similarity_profile(
    rig: &Rig,
    scene: &Scene,
    maps: &[FeatureMap],
    params: &FusionParams,
    config: &PipelineConfig,
    reference_view: usize,
    source_view: usize,
    joint: usize,
) -> Result<JointProfile> {
    let n = rig.cameras.len();
    if reference_view >= n || source_view >= n || joint >= scene.joints.len() || reference_view == source_view {
        return Err(Error::InvalidArgument(format!(
            "views ({reference_view}, {source_view}) or joint {joint} out of range"
        )));
    }
    let (ref_cam, src_cam) = (&rig.cameras[reference_view], &rig.cameras[source_view]);
    let (ref_map, src_map) = (&maps[reference_view], &maps[source_view]);
    let geometry = SamplerGeometry::for_maps(
        ref_cam,
        src_cam,
        (ref_map.width(), ref_map.height()),
        (src_map.width(), src_map.height()),
    )?;
    let x = &scene.joints[joint];
    let mut profile = JointProfile {
        joint,
        reference_view,
        source_view,
        truth: None,
        rows: Vec::new(),
    };
    let Some(truth) = visible(&geometry.source, x) else {
        return Ok(profile);
    };
    profile.truth = Some([truth.x, truth.y]);
    let Some(query_px) = visible(&geometry.reference, x) else {
        return Ok(profile);
    };
    let Some(set) = geometry.sample(src_map, &query_px, config.k) else {
        return Ok(profile);
    };
    let query = bilinear_sample(ref_map, &query_px);
    let att = attend(&query, &set, params)?;
    let k = set.len();
    profile.rows = set
        .locations
        .iter()
        .enumerate()
        .map(|(i, loc)| ProfileRow {
            t: if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 },
            x: loc.x,
            y: loc.y,
            weight: att.weights[i],
            dot: att.scores[i],
        })
        .collect();
    Ok(profile)
}

/// Whether the highest-weight sample of a profile lies within one sample step
/// of the true correspondence.
pub fn profile_matches(profile: &JointProfile) -> Option<bool> {
    let truth = profile.truth?;
    let rows = &profile.rows;
    let first = rows.first()?;
    let last = rows.last()?;
    let step = if rows.len() > 1 {
        ((last.x - first.x).powi(2) + (last.y - first.y).powi(2)).sqrt() / (rows.len() - 1) as f64
    } else {
        0.0
    };
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.weight > rows[b].weight { i } else { b });
    let d = ((rows[best].x - truth[0]).powi(2) + (rows[best].y - truth[1]).powi(2)).sqrt();
    Some(d <= step + 1e-9)
}

/// Renders every view, fuses each with its source view, reads out 2D joints,
/// and triangulates them.
pub fn run_pipeline(rig: &Rig, scene: &Scene, params: &FusionParams, config: &PipelineConfig) -> Result<PipelineOutput> {
    let n = rig.cameras.len();
    let j_count = scene.joints.len();
    if scene.channels() != params.channels() {
        return Err(Error::ChannelMismatch {
            reference: params.channels(),
            src: scene.channels(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument("pipeline needs at least two views".into()));
    }
    if config.profile_view >= n {
        return Err(Error::InvalidArgument(format!("profile view {} out of range", config.profile_view)));
    }

    let maps: Vec<FeatureMap> = rig
        .cameras
        .par_iter()
        .map(|cam| render_descriptor_map(cam, scene, config.sigma_px, config.map_wh))
        .collect::<Result<_>>()?;
    let sources: Vec<usize> = (0..n)
        .map(|v| rig.source_for(v, config.target_angle_deg).expect("n ≥ 2"))
        .collect();
    let fused: Vec<FeatureMap> = (0..n)
        .map(|v| {
            let s = sources[v];
            transformer_forward(
                &maps[v],
                &maps[s],
                &rig.cameras[v],
                &rig.cameras[s],
                params,
                config.k,
                ForwardOptions::default(),
            )
            .map(|out| out.fused)
        })
        .collect::<Result<_>>()?;

    // Attention matching at exact joint projections.
    let mut matched = 0;
    let mut match_queries = 0;
    let mut profiles = Vec::new();
    for v in 0..n {
        for j in 0..j_count {
            let profile = similarity_profile(rig, scene, &maps, params, config, v, sources[v], j)?;
            let both_visible =
                visible(&rig.cameras[v], &scene.joints[j]).is_some() && visible(&rig.cameras[sources[v]], &scene.joints[j]).is_some();
            if both_visible {
                match_queries += 1;
                if profile_matches(&profile) == Some(true) {
                    matched += 1;
                }
            }
            if v == config.profile_view {
                profiles.push(profile);
            }
        }
    }

    // 2D readout by descriptor correlation with the fused maps.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_px.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut detections: Vec<Vec<Option<(Point2<f64>, Point2<f64>, f64)>>> = vec![vec![None; j_count]; n];
    let mut jdr_pred = Vec::new();
    let mut jdr_gt = Vec::new();
    for v in 0..n {
        let cam = &rig.cameras[v];
        let map = &fused[v];
        for j in 0..j_count {
            let Some(truth) = visible(cam, &scene.joints[j]) else {
                continue;
            };
            let d = &scene.descriptors[j];
            let scores = (0..map.height())
                .flat_map(|y| (0..map.width()).map(move |x| (x, y)))
                .map(|(x, y)| dot(map.pixel(x, y), d))
                .collect();
            let heatmap = Heatmap::new(map.height(), map.width(), scores)?;
            let (peak, confidence) = argmax_peak(&heatmap);
            let jitter = nalgebra::Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            let detected = image_from_map(&peak, cam, config.map_wh) + jitter;
            jdr_pred.push(detected);
            jdr_gt.push(truth);
            detections[v][j] = Some((detected, truth + jitter, confidence));
        }
    }
    let jdr_pct = if jdr_gt.is_empty() {
        f64::NAN
    } else {
        jdr(&jdr_pred, &jdr_gt, &vec![config.head_size_px; jdr_gt.len()])?
    };

    let per_joint: Vec<JointReport> = (0..j_count)
        .into_par_iter()
        .map(|j| {
            let mut heat_obs = Vec::new();
            let mut exact_obs = Vec::new();
            for v in 0..n {
                if let Some((det, exact, conf)) = detections[v][j] {
                    heat_obs.push(Observation::new(&rig.cameras[v], det, conf));
                    exact_obs.push(Observation::new(&rig.cameras[v], exact, 1.0));
                }
            }
            let seed = config.seed.wrapping_add(j as u64);
            let truth = scene.joints[j];
            let (error_mm, inliers) = match ransac_triangulate(&heat_obs, &config.ransac, seed) {
                Ok(r) => (Some((r.point - truth).norm()), r.inlier_count()),
                Err(_) => (None, 0),
            };
            let analytic = if config.noise_px > 0.0 {
                ransac_triangulate(&exact_obs, &config.ransac, seed).ok().map(|r| r.point)
            } else {
                dlt_triangulate(&exact_obs).ok()
            };
            JointReport {
                joint: j,
                views: heat_obs.len(),
                inliers,
                error_mm,
                analytic_error_mm: analytic.map(|p| (p - truth).norm()),
            }
        })
        .collect();

    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let errors: Vec<f64> = per_joint.iter().filter_map(|r| r.error_mm).collect();
    let triangulated = errors.len();
    let report = Report {
        mpjpe_mm: mean(errors),
        analytic_mpjpe_mm: mean(per_joint.iter().filter_map(|r| r.analytic_error_mm).collect()),
        jdr_pct,
        matching_accuracy: if match_queries == 0 {
            f64::NAN
        } else {
            matched as f64 / match_queries as f64
        },
        matched,
        match_queries,
        triangulated,
        source_views: sources,
        per_joint,
        profiles,
    };
    Ok(PipelineOutput {
        report,
        feature_maps: maps,
        fused_maps: fused,
    })
}

/// Applies the rigid motion `x ↦ R·x + t` to a whole rig.
pub fn transform_rig(rig: &Rig, rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Result<Rig> {
    // M' = M·T⁻¹ with T⁻¹ = [Rᵀ | −Rᵀt].
    let rt = rotation.matrix().transpose();
    let mut inv = nalgebra::Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(rt * translation)));
    let cameras = rig
        .cameras
        .iter()
        .map(|c| CameraView::new(c.matrix() * inv, c.width(), c.height()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rig::from_cameras(cameras))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cameras_at_right_angle() {
        let rig = make_rig(2, 90.0, 2000.0, (640, 480), 500.0, 0).unwrap();
        let a = rig.cameras[0].center_point().unwrap();
        let b = rig.cameras[1].center_point().unwrap();
        assert!(((a - b).norm() - 2000.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((rig.angles[0][1] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn consecutive_axes_are_separated_by_the_requested_angle() {
        let rig = make_rig(10, 24.0, 2000.0, (640, 480), 500.0, 3).unwrap();
        for i in 0..9 {
            let a = optical_axis(&rig.cameras[i]);
            let b = optical_axis(&rig.cameras[i + 1]);
            let deg = a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((deg - 24.0).abs() < 0.1);
        }
        for cam in &rig.cameras {
            // Every camera looks at the origin.
            let p = cam.project(&Point3::origin()).unwrap();
            assert!((p - Point2::new(319.5, 239.5)).norm() < 1e-9);
            assert!(cam.depth(&Point3::origin()) > 0.0);
        }
    }

    #[test]
    fn invalid_angles() {
        for a in [0.0, -5.0, 180.0, f64::NAN] {
            assert!(matches!(make_rig(4, a, 2000.0, (64, 64), 50.0, 0), Err(Error::InvalidAngle(_))));
        }
    }

    #[test]
    fn source_selection_prefers_target_angle() {
        let rig = make_rig(10, 12.0, 2000.0, (64, 64), 50.0, 0).unwrap();
        assert_eq!(rig.source_for(0, 24.0), Some(2));
        assert_eq!(rig.source_for(5, 24.0), Some(3));
    }

    #[test]
    fn scenes() {
        let s = make_scene(1, 1000.0, 8, 0).unwrap();
        assert_eq!(s.joints.len(), 1);
        let n: f64 = s.descriptors[0].iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);

        let s = make_scene(21, 1000.0, 32, 1).unwrap();
        for i in 0..21 {
            for j in 0..i {
                assert!(dot(&s.descriptors[i], &s.descriptors[j]) < 0.5);
            }
            assert!(s.joints[i].coords.amax() <= 500.0);
        }
        assert_eq!(
            make_scene(100, 1000.0, 4, 2),
            Err(Error::DescriptorSaturation { joints: 100, channels: 4 })
        );
    }

    #[test]
    fn descriptor_map_peaks() {
        let rig = make_rig(2, 30.0, 3000.0, (256, 256), 300.0, 0).unwrap();
        let cam = &rig.cameras[0];
        // The origin projects to the image center, which maps to map pixel (31.5, 31.5)
        // at 4× downsampling; shift the image so it lands on (32, 32).
        let mut scene = make_scene(1, 10.0, 8, 0).unwrap();
        scene.joints[0] = Point3::origin();
        let shifted = crate::geometry::apply_affine_to_camera(
            cam,
            &nalgebra::Matrix2::identity(),
            &nalgebra::Vector2::new(2.0, 2.0),
            256,
            256,
        )
        .unwrap();
        let map = render_descriptor_map(&shifted, &scene, 1.5, (64, 64)).unwrap();
        for (a, b) in map.pixel(32, 32).iter().zip(&scene.descriptors[0]) {
            assert!((a - b).abs() < 1e-15);
        }

        // Joint behind the camera contributes nothing.
        let behind = cam.center_point().unwrap() * 1.5;
        scene.joints[0] = behind;
        let map = render_descriptor_map(cam, &scene, 1.5, (64, 64)).unwrap();
        assert!(map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn separated_joints_keep_their_descriptors() {
        let rig = make_rig(2, 30.0, 3000.0, (256, 256), 300.0, 0).unwrap();
        let cam = &rig.cameras[0];
        let mut scene = make_scene(3, 10.0, 16, 4).unwrap();
        let side = optical_axis(cam).cross(&Vector3::y()).normalize();
        scene.joints = vec![Point3::from(side * -600.0), Point3::origin(), Point3::from(side * 600.0)];
        let map = render_descriptor_map(cam, &scene, 1.5, (64, 64)).unwrap();
        let map_cam = camera_for_resolution(cam, 64, 64).unwrap();
        for (x, d) in scene.joints.iter().zip(&scene.descriptors) {
            let p = map_cam.project(x).unwrap();
            let f = bilinear_sample(&map, &p);
            let cos = dot(&f, d) / dot(&f, &f).sqrt();
            assert!(cos > 0.99, "cosine {cos}");
        }
    }
}
