//! Projective camera algebra.
//!
//! A [`CameraView`] is a 3×4 projection matrix together with the image extent
//! it projects into. Pixel coordinates address pixel *centers*: the top-left
//! pixel center is `(0, 0)` and the valid domain of a `W×H` image is
//! `[0, W−1] × [0, H−1]`.
//!
//! The epipolar line of a reference pixel `p` in a source view is
//!
//! ```text
//! l = [M'C]ₓ M' M⁺ p
//! ```
//!
//! where `C` is the reference camera center, `M⁺` the Moore–Penrose inverse of
//! the reference projection and `[·]ₓ` the cross-product matrix. Lines are
//! returned normalized so that `a² + b² = 1`, which makes `|lᵀp|` a distance in
//! pixels.

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Matrix4x3, Point2, Point3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degeneracy thresholds shared by every geometric operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// A projection matrix is rank deficient when `σ₃ < rank_rel · σ₁`.
    pub rank_rel: f64,
    /// Unit-normalized camera centers closer than this (as projective points)
    /// are treated as coincident.
    pub coincident_rel: f64,
    /// An epipolar line with `‖(a, b)‖` below this fraction of its scale is degenerate.
    pub degenerate_line_rel: f64,
    /// Affine maps with `|det A|` below this are singular.
    pub affine_det: f64,
    /// Projections with `|w|` below this are at infinity.
    pub at_infinity: f64,
}

impl Thresholds {
    pub const DEFAULT: Thresholds = Thresholds {
        rank_rel: 1e-12,
        coincident_rel: 1e-9,
        degenerate_line_rel: 1e-12,
        affine_det: 1e-12,
        at_infinity: 1e-12,
    };
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::DEFAULT
    }
}

const TOL: Thresholds = Thresholds::DEFAULT;

/// A calibrated view: projection matrix plus image extent in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraView {
    m: Matrix3x4<f64>,
    width: u32,
    height: u32,
}

/// On-disk layout: `{"M": [12 numbers, row-major], "width": int, "height": int}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    #[serde(rename = "M")]
    m: Vec<f64>,
    width: u32,
    height: u32,
}

impl TryFrom<CameraRecord> for CameraView {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        if rec.m.len() != 12 {
            return Err(Error::InvalidCamera(format!(
                "M must have 12 entries, got {}",
                rec.m.len()
            )));
        }
        CameraView::new(Matrix3x4::from_row_slice(&rec.m), rec.width, rec.height)
    }
}

impl From<CameraView> for CameraRecord {
    fn from(cam: CameraView) -> Self {
        let m = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| cam.m[(r, c)])
            .collect();
        CameraRecord {
            m,
            width: cam.width,
            height: cam.height,
        }
    }
}

impl CameraView {
    /// Validates rank, finiteness and image extent.
    pub fn new(m: Matrix3x4<f64>, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image extent must be at least 1×1, got {width}×{height}"
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite matrix entry".into()));
        }
        check_rank(&m)?;
        Ok(Self { m, width, height })
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Unit-norm homogeneous camera center.
    pub fn center(&self) -> Vector4<f64> {
        null_vector(&self.m)
    }

    /// Dehomogenized camera center, or `None` for a camera at infinity.
    pub fn center_point(&self) -> Option<Point3<f64>> {
        let c = self.center();
        (c.w.abs() > TOL.at_infinity).then(|| Point3::new(c.x / c.w, c.y / c.w, c.z / c.w))
    }

    pub fn project(&self, x: &Point3<f64>) -> Result<Point2<f64>> {
        project(self, x)
    }

    /// Signed depth of `x` along the principal axis, positive in front of the
    /// camera regardless of the overall sign of `M`.
    pub fn depth(&self, x: &Point3<f64>) -> f64 {
        let w = self.m.row(2).dot(&x.to_homogeneous().transpose());
        let m3 = self.m.fixed_view::<3, 3>(0, 0);
        let det = m3.determinant();
        let row3 = Vector3::new(self.m[(2, 0)], self.m[(2, 1)], self.m[(2, 2)]);
        det.signum() * w / row3.norm()
    }

    /// Whether `p` lies inside the valid pixel-center domain of this image.
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= f64::from(self.width) - 1.0
            && p.y <= f64::from(self.height) - 1.0
    }
}

fn check_rank(m: &Matrix3x4<f64>) -> Result<()> {
    let sv = m.svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < TOL.rank_rel * max {
        return Err(Error::RankDeficient {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    Ok(())
}

/// Right null vector of a rank-3 `3×4` matrix via signed 3×3 minors.
fn null_vector(m: &Matrix3x4<f64>) -> Vector4<f64> {
    let minor = |skip: usize| {
        let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
        Matrix3::from_fn(|r, c| m[(r, cols[c])]).determinant()
    };
    let mut c = Vector4::new(minor(0), -minor(1), minor(2), -minor(3));
    c /= c.norm();
    let last = c.iter().rev().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
    if last < 0.0 {
        c = -c;
    }
    c
}

/// Homogeneous camera center `C` with `M·C = 0`, `‖C‖ = 1`, and the last
/// nonzero coordinate positive.
pub fn camera_center(cam: &CameraView) -> Vector4<f64> {
    cam.center()
}

/// Moore–Penrose inverse of a full-row-rank projection matrix.
///
/// With `Mᵀ = Q·R` (thin QR), `M⁺ = Q·R⁻ᵀ`. This avoids forming `M·Mᵀ`, so
/// `M·M⁺ = I` holds to roughly `ε·κ(M)` instead of `ε·κ(M)²`.
pub fn pseudo_inverse(m: &Matrix3x4<f64>) -> Result<Matrix4x3<f64>> {
    check_rank(m)?;
    let qr = m.transpose().qr();
    let q = qr.q();
    let r = qr.r();
    let r_inv_t = r
        .transpose()
        .try_inverse()
        .ok_or(Error::RankDeficient { ratio: 0.0 })?;
    Ok(q * r_inv_t)
}

/// Cross-product matrix: `skew(v) · w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A line `ax + by + c = 0` in pixel coordinates with `a² + b² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    coeffs: Vector3<f64>,
}

impl EpipolarLine {
    /// Normalizes `l` so that `a² + b² = 1` and the first non-negligible
    /// coefficient among `(a, b)` is positive.
    pub fn new(l: Vector3<f64>) -> Result<Self> {
        let scale = l.norm();
        Self::with_scale(l, scale)
    }

    fn with_scale(l: Vector3<f64>, scale: f64) -> Result<Self> {
        let ab = l.x.hypot(l.y);
        if !ab.is_finite() || !(ab > TOL.degenerate_line_rel * scale) {
            return Err(Error::DegenerateLine);
        }
        let mut coeffs = l / ab;
        let lead = if coeffs.x.abs() > 1e-12 { coeffs.x } else { coeffs.y };
        if lead < 0.0 {
            coeffs = -coeffs;
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> Vector3<f64> {
        self.coeffs
    }

    pub fn a(&self) -> f64 {
        self.coeffs.x
    }

    pub fn b(&self) -> f64 {
        self.coeffs.y
    }

    pub fn c(&self) -> f64 {
        self.coeffs.z
    }

    /// Signed point-to-line distance in pixels.
    pub fn signed_distance(&self, p: &Point2<f64>) -> f64 {
        self.coeffs.x * p.x + self.coeffs.y * p.y + self.coeffs.z
    }
}

fn distinct_centers(reference: &CameraView, source: &CameraView) -> Result<Vector4<f64>> {
    let c = reference.center();
    let c_src = source.center();
    // Sine of the angle between the two centers as projective points.
    let rejection = (c - c_src * c.dot(&c_src)).norm();
    if rejection < TOL.coincident_rel {
        return Err(Error::CoincidentCenters);
    }
    Ok(c)
}

/// Epipolar geometry of an ordered camera pair with the per-pair factors of
/// `l = [M'C]ₓ M' M⁺ p` computed once.
#[derive(Debug, Clone)]
pub struct EpipolarGeometry {
    epipole: Vector3<f64>,
    transfer: Matrix3<f64>,
}

impl EpipolarGeometry {
    pub fn new(reference: &CameraView, source: &CameraView) -> Result<Self> {
        let c = distinct_centers(reference, source)?;
        Ok(Self {
            epipole: source.matrix() * c,
            transfer: source.matrix() * pseudo_inverse(reference.matrix())?,
        })
    }

    /// Image of the reference center in the source view (homogeneous).
    pub fn epipole(&self) -> Vector3<f64> {
        self.epipole
    }

    pub fn line(&self, p: &Vector3<f64>) -> Result<EpipolarLine> {
        let ray_point = self.transfer * p;
        let l = self.epipole.cross(&ray_point);
        EpipolarLine::with_scale(l, self.epipole.norm() * ray_point.norm())
    }

    /// `F = [M'C]ₓ M' M⁺`.
    pub fn fundamental(&self) -> Matrix3<f64> {
        skew(&self.epipole) * self.transfer
    }
}

/// The source-view line on which every correspondence of reference pixel `p`
/// lies. `p` is homogeneous, normally `(x, y, 1)`.
pub fn epipolar_line(
    reference: &CameraView,
    source: &CameraView,
    p: &Vector3<f64>,
) -> Result<EpipolarLine> {
    EpipolarGeometry::new(reference, source)?.line(p)
}

/// `F = [M'C]ₓ M' M⁺`, so that `F·p` is the (unnormalized) epipolar line of `p`.
pub fn fundamental_matrix(reference: &CameraView, source: &CameraView) -> Result<Matrix3<f64>> {
    Ok(EpipolarGeometry::new(reference, source)?.fundamental())
}

/// Updates a camera for an image warped by `x ↦ A·x + b`.
pub fn apply_affine_to_camera(
    cam: &CameraView,
    a: &Matrix2<f64>,
    b: &Vector2<f64>,
    new_width: u32,
    new_height: u32,
) -> Result<CameraView> {
    let det = a.determinant();
    if !(det.abs() >= TOL.affine_det) {
        return Err(Error::SingularAffine(det.abs()));
    }
    #[rustfmt::skip]
    let h = Matrix3::new(
        a[(0, 0)], a[(0, 1)], b.x,
        a[(1, 0)], a[(1, 1)], b.y,
        0.0,       0.0,       1.0,
    );
    CameraView::new(h * cam.matrix(), new_width, new_height)
}

/// Updates a camera for an image downsampled `s_x` and `s_y` times, keeping
/// pixel centers aligned. The new extent is the old one divided and floored.
pub fn rescale_camera(cam: &CameraView, s_x: f64, s_y: f64) -> Result<CameraView> {
    if !(s_x > 0.0 && s_y > 0.0 && s_x.is_finite() && s_y.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scale factors must be positive, got ({s_x}, {s_y})"
        )));
    }
    #[rustfmt::skip]
    let h = Matrix3::new(
        1.0 / s_x, 0.0,       (1.0 - s_x) / (2.0 * s_x),
        0.0,       1.0 / s_y, (1.0 - s_y) / (2.0 * s_y),
        0.0,       0.0,       1.0,
    );
    let w = ((f64::from(cam.width) / s_x).floor() as u32).max(1);
    let hgt = ((f64::from(cam.height) / s_y).floor() as u32).max(1);
    CameraView::new(h * cam.matrix(), w, hgt)
}

/// Rescales `cam` so that its image extent becomes `width × height`.
pub fn camera_for_resolution(cam: &CameraView, width: u32, height: u32) -> Result<CameraView> {
    if cam.width == width && cam.height == height {
        return Ok(cam.clone());
    }
    let s_x = f64::from(cam.width) / f64::from(width);
    let s_y = f64::from(cam.height) / f64::from(height);
    let mut out = rescale_camera(cam, s_x, s_y)?;
    // Floor can lose one pixel to round-off when the ratio is exact.
    out.width = width;
    out.height = height;
    Ok(out)
}

/// Pinhole projection of a 3D point to pixel coordinates.
pub fn project(cam: &CameraView, x: &Point3<f64>) -> Result<Point2<f64>> {
    let h = cam.m * x.to_homogeneous();
    if !(h.z.abs() >= TOL.at_infinity) {
        return Err(Error::AtInfinity);
    }
    Ok(Point2::new(h.x / h.z, h.y / h.z))
}
