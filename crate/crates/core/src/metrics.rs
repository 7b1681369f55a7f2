//! Heatmap targets and readout, and the pose metrics used for evaluation.

use nalgebra::{Point2, Point3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::PoseRow;

/// Default Gaussian width for heatmap targets, in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// A single-joint `H × W` score map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}×{width} heatmap needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("heatmap has non-finite values".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Unnormalized Gaussian bump with peak 1 at `center`.
pub fn render_gaussian_heatmap(center: &Point2<f64>, sigma: f64, height: usize, width: usize) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let dx = x as f64 - center.x;
            let dy = y as f64 - center.y;
            (-(dx * dx + dy * dy) / denom).exp()
        })
        .collect();
    Heatmap::new(height, width, data)
}

pub fn mse_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}×{}, target is {}×{}",
            pred.height, pred.width, target.height, target.width
        )));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// Peak location and height.
///
/// The integer argmax (ties go to the lowest row, then the lowest column) is
/// shifted a quarter pixel toward the larger immediate neighbor on each axis.
pub fn argmax_peak(h: &Heatmap) -> (Point2<f64>, f64) {
    let mut best = 0;
    for (i, v) in h.data.iter().enumerate() {
        if *v > h.data[best] {
            best = i;
        }
    }
    let (x, y) = (best % h.width, best / h.width);
    let shift = |lo: Option<f64>, hi: Option<f64>| match (lo, hi) {
        (Some(l), Some(r)) if r > l => 0.25,
        (Some(l), Some(r)) if l > r => -0.25,
        _ => 0.0,
    };
    let left = (x > 0).then(|| h.at(x - 1, y));
    let right = (x + 1 < h.width).then(|| h.at(x + 1, y));
    let up = (y > 0).then(|| h.at(x, y - 1));
    let down = (y + 1 < h.height).then(|| h.at(x, y + 1));
    (
        Point2::new(x as f64 + shift(left, right), y as f64 + shift(up, down)),
        h.data[best],
    )
}

/// Per-joint 3D positions with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Point3<f64>>,
    pub valid: Vec<bool>,
}

impl Pose3D {
    pub fn all_valid(joints: Vec<Point3<f64>>) -> Self {
        let valid = vec![true; joints.len()];
        Self { joints, valid }
    }
}

/// Per-joint 2D positions with detection confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub joints: Vec<Point2<f64>>,
    pub confidences: Vec<f64>,
}

/// Per-joint Euclidean errors; `None` for masked joints.
pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<Option<f64>>> {
    if pred.joints.len() != gt.joints.len()
        || pred.valid != gt.valid
        || pred.valid.len() != pred.joints.len()
    {
        return Err(Error::MaskMismatch);
    }
    Ok(pred
        .joints
        .iter()
        .zip(&gt.joints)
        .zip(&gt.valid)
        .map(|((p, g), &v)| v.then(|| (p - g).norm()))
        .collect())
}

/// Mean per-joint position error over valid joints. `NaN` when no joint is valid.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let errors: Vec<f64> = per_joint_errors(pred, gt)?.into_iter().flatten().collect();
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Percentage of joints strictly closer than half the head size.
pub fn jdr(pred: &[Point2<f64>], gt: &[Point2<f64>], head_sizes: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != head_sizes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} ground-truth joints, {} head sizes",
            pred.len(),
            gt.len(),
            head_sizes.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    let detected = pred
        .iter()
        .zip(gt)
        .zip(head_sizes)
        .filter(|((p, g), &hs)| (*p - *g).norm() < 0.5 * hs)
        .count();
    Ok(100.0 * detected as f64 / pred.len() as f64)
}

/// Per joint, keeps the prediction of the most confident view (ties go to the
/// lower view index).
pub fn select_best_view(candidates: &[Pose2D]) -> Result<Pose2D> {
    let first = candidates.first().ok_or(Error::Empty)?;
    let j = first.joints.len();
    if candidates
        .iter()
        .any(|c| c.joints.len() != j || c.confidences.len() != j)
    {
        return Err(Error::LengthMismatch("candidate poses differ in joint count".into()));
    }
    let mut out = first.clone();
    for cand in &candidates[1..] {
        for i in 0..j {
            if cand.confidences[i] > out.confidences[i] {
                out.joints[i] = cand.joints[i];
                out.confidences[i] = cand.confidences[i];
            }
        }
    }
    Ok(out)
}

/// JSON evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mpjpe_mm: Option<f64>,
    pub jdr_pct: Option<f64>,
    pub per_joint: Vec<JointEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointEval {
    pub joint_id: u32,
    pub error_mm: Option<f64>,
    pub error_px: f64,
    pub detected: Option<bool>,
}

/// Compares two pose files row by row. Rows must list the same joints in
/// the same order. 3D error is reported when both files carry `z`; JDR on
/// `(x, y)` when head sizes are given, either one per row or a single value
/// for all rows.
pub fn evaluate(pred: &[PoseRow], gt: &[PoseRow], head_sizes: Option<&[f64]>) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(format!(
            "prediction has {} rows, ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.joint_id != g.joint_id {
            return Err(Error::LengthMismatch(format!(
                "prediction line {} has joint {}, ground truth line {} has joint {}",
                p.line, p.joint_id, g.line, g.joint_id
            )));
        }
        if p.z.is_some() != g.z.is_some() {
            return Err(Error::LengthMismatch(format!(
                "prediction line {} and ground truth line {} disagree on the z column",
                p.line, g.line
            )));
        }
    }
    let heads: Option<Vec<f64>> = match head_sizes {
        None => None,
        Some([h]) => Some(vec![*h; gt.len()]),
        Some(h) if h.len() == gt.len() => Some(h.to_vec()),
        Some(h) => {
            return Err(Error::LengthMismatch(format!(
                "{} head sizes for {} joints",
                h.len(),
                gt.len()
            )))
        }
    };
    let flat = |r: &PoseRow| Point2::new(r.x, r.y);
    let jdr_pct = match &heads {
        Some(h) => Some(jdr(
            &pred.iter().map(flat).collect::<Vec<_>>(),
            &gt.iter().map(flat).collect::<Vec<_>>(),
            h,
        )?),
        None => None,
    };
    let per_joint: Vec<JointEval> = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| {
            let error_px = (flat(p) - flat(g)).norm();
            JointEval {
                joint_id: p.joint_id,
                error_mm: p
                    .z
                    .zip(g.z)
                    .map(|(pz, gz)| (Point3::new(p.x, p.y, pz) - Point3::new(g.x, g.y, gz)).norm()),
                error_px,
                detected: heads.as_ref().map(|h| error_px < 0.5 * h[i]),
            }
        })
        .collect();
    let errors: Vec<f64> = per_joint.iter().filter_map(|j| j.error_mm).collect();
    let mpjpe_mm = (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64);
    Ok(EvalReport {
        mpjpe_mm,
        jdr_pct,
        per_joint,
    })
}
