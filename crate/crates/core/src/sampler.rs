//! The epipolar sampler.
//!
//! Given a reference pixel, the sampler locates its epipolar line in the
//! source view, clips the line to the source image, takes `K` evenly spaced
//! sub-pixel locations along the visible segment (endpoints included) and
//! reads a feature vector at each one by bilinear interpolation.

use nalgebra::Point2;

use crate::error::{Error, Result};
use crate::geometry::{camera_for_resolution, CameraView, EpipolarGeometry, EpipolarLine};

/// Number of samples taken along each epipolar line unless told otherwise.
pub const DEFAULT_SAMPLES: usize = 64;

/// Dense `H × W × C` feature array stored row-major in `(y, x, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidFeatureMap(format!(
                "spatial extent must be at least 2×2, got {height}×{width}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidFeatureMap("channel count must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidFeatureMap(format!(
                "expected {} values for {height}×{width}×{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureMap(format!("non-finite value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a map from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = self.pixel_offset(x, y);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = self.pixel_offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Valid pixel-center domain `[0, W−1] × [0, H−1]`.
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// The four pixels and weights that a bilinear read at a point blends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearFootprint {
    /// `(x, y)` of the four corners: top-left, top-right, bottom-left, bottom-right.
    pub pixels: [(usize, usize); 4],
    pub weights: [f64; 4],
}

impl BilinearFootprint {
    /// Clamps `pt` to `[0, W−1] × [0, H−1]` and locates its enclosing cell.
    pub fn new(width: usize, height: usize, pt: &Point2<f64>) -> Self {
        let x = pt.x.clamp(0.0, (width - 1) as f64);
        let y = pt.y.clamp(0.0, (height - 1) as f64);
        let x0 = (x.floor() as usize).min(width - 2);
        let y0 = (y.floor() as usize).min(height - 2);
        let dx = x - x0 as f64;
        let dy = y - y0 as f64;
        Self {
            pixels: [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)],
            weights: [
                (1.0 - dx) * (1.0 - dy),
                dx * (1.0 - dy),
                (1.0 - dx) * dy,
                dx * dy,
            ],
        }
    }
}

/// Bilinear read of all channels at a sub-pixel location. Out-of-domain
/// points are clamped to the border.
pub fn bilinear_sample(map: &FeatureMap, pt: &Point2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    bilinear_sample_into(map, pt, &mut out);
    out
}

pub(crate) fn bilinear_sample_into(map: &FeatureMap, pt: &Point2<f64>, out: &mut [f64]) {
    let fp = BilinearFootprint::new(map.width, map.height, pt);
    out.fill(0.0);
    for (&(x, y), &w) in fp.pixels.iter().zip(&fp.weights) {
        for (o, v) in out.iter_mut().zip(map.pixel(x, y)) {
            *o += w * v;
        }
    }
}

/// A line segment with both endpoints inside an image domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2D {
    pub start: Point2<f64>,
    pub end: Point2<f64>,
}

impl Segment2D {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn point_at(&self, t: f64) -> Point2<f64> {
        self.start + (self.end - self.start) * t
    }
}

fn lexicographic(a: &Point2<f64>, b: &Point2<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Clips a normalized line to `[0, W−1] × [0, H−1]`.
///
/// Returns `None` when the line misses the rectangle. A line touching a single
/// corner yields a zero-length segment. Endpoints are ordered by increasing
/// `x`, then `y`.
pub fn clip_line_to_image(line: &EpipolarLine, width: usize, height: usize) -> Option<Segment2D> {
    let (a, b, c) = (line.a(), line.b(), line.c());
    let x_max = width.saturating_sub(1) as f64;
    let y_max = height.saturating_sub(1) as f64;
    let slack = 1e-9 * (1.0 + x_max.max(y_max));

    // Intersections with the four edge-lines, kept when they land on the edge.
    let mut hits: Vec<Point2<f64>> = Vec::with_capacity(4);
    if b != 0.0 {
        for x in [0.0, x_max] {
            let y = -(a * x + c) / b;
            if y >= -slack && y <= y_max + slack {
                hits.push(Point2::new(x, y.clamp(0.0, y_max)));
            }
        }
    }
    if a != 0.0 {
        for y in [0.0, y_max] {
            let x = -(b * y + c) / a;
            if x >= -slack && x <= x_max + slack {
                hits.push(Point2::new(x.clamp(0.0, x_max), y));
            }
        }
    }
    let start = *hits.iter().min_by(|p, q| lexicographic(p, q))?;
    let end = *hits.iter().max_by(|p, q| lexicographic(p, q))?;
    Some(Segment2D { start, end })
}

/// `K` evenly spaced points at `t = i / (K − 1)` along the segment. `K = 1`
/// gives the midpoint.
pub fn sample_locations(seg: &Segment2D, k: usize) -> Vec<Point2<f64>> {
    match k {
        0 => Vec::new(),
        1 => vec![seg.point_at(0.5)],
        _ => (0..k)
            .map(|i| {
                if i == k - 1 {
                    seg.end
                } else {
                    seg.point_at(i as f64 / (k - 1) as f64)
                }
            })
            .collect(),
    }
}

/// Samples read along one epipolar line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarSampleSet {
    /// The line in source feature-map pixel coordinates.
    pub line: EpipolarLine,
    pub segment: Segment2D,
    pub locations: Vec<Point2<f64>>,
    /// `K × C`, row-major.
    pub features: Vec<f64>,
    pub channels: usize,
}

impl EpipolarSampleSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Spacing between consecutive samples in source-map pixels.
    pub fn step(&self) -> f64 {
        match self.locations.len() {
            0 | 1 => 0.0,
            k => self.segment.length() / (k - 1) as f64,
        }
    }
}

/// Cameras expressed in the pixel frames of the feature maps they index.
#[derive(Debug, Clone)]
pub struct SamplerGeometry {
    pub reference: CameraView,
    pub source: CameraView,
    epipolar: EpipolarGeometry,
}

impl SamplerGeometry {
    pub fn new(reference: CameraView, source: CameraView) -> Result<Self> {
        let epipolar = EpipolarGeometry::new(&reference, &source)?;
        Ok(Self {
            reference,
            source,
            epipolar,
        })
    }

    /// Rescales both cameras to the given map resolutions `(width, height)`.
    pub fn for_maps(
        reference: &CameraView,
        source: &CameraView,
        ref_wh: (usize, usize),
        src_wh: (usize, usize),
    ) -> Result<Self> {
        Self::new(
            camera_for_resolution(reference, dim(ref_wh.0)?, dim(ref_wh.1)?)?,
            camera_for_resolution(source, dim(src_wh.0)?, dim(src_wh.1)?)?,
        )
    }

    /// Line, segment and sample locations for reference pixel `p`, or `None`
    /// when the query is skipped (degenerate line or no visible segment).
    pub fn locate(&self, p: &Point2<f64>, k: usize) -> Option<(EpipolarLine, Segment2D, Vec<Point2<f64>>)> {
        let line = self.epipolar.line(&p.to_homogeneous()).ok()?;
        let w = self.source.width() as usize;
        let h = self.source.height() as usize;
        clip_line_to_image(&line, w, h).map(|seg| {
            let locations = sample_locations(&seg, k);
            (line, seg, locations)
        })
    }

    /// Reads `map` along the epipolar line of `p`.
    pub fn sample(&self, map: &FeatureMap, p: &Point2<f64>, k: usize) -> Option<EpipolarSampleSet> {
        self.locate(p, k)
            .map(|(line, segment, locations)| read_samples(map, line, segment, locations))
    }
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("extent {v} too large")))
}

/// Samples `source_map` along the epipolar line of reference pixel `p`.
///
/// `p` is in the reference camera's own pixel frame. When `source_map` is
/// smaller than the source image, the source camera is first rescaled to the
/// map's resolution. Returns `Ok(None)` for skipped queries.
pub fn epipolar_samples(
    source_map: &FeatureMap,
    reference: &CameraView,
    source: &CameraView,
    p: &Point2<f64>,
    k: usize,
) -> Result<Option<EpipolarSampleSet>> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let geometry = SamplerGeometry::new(
        reference.clone(),
        camera_for_resolution(source, dim(source_map.width)?, dim(source_map.height)?)?,
    )?;
    Ok(geometry.sample(source_map, p, k))
}

pub(crate) fn read_samples(
    map: &FeatureMap,
    line: EpipolarLine,
    segment: Segment2D,
    locations: Vec<Point2<f64>>,
) -> EpipolarSampleSet {
    let c = map.channels;
    let mut features = vec![0.0; locations.len() * c];
    for (loc, row) in locations.iter().zip(features.chunks_exact_mut(c)) {
        bilinear_sample_into(map, loc, row);
    }
    EpipolarSampleSet {
        line,
        segment,
        locations,
        features,
        channels: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3x4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Parametric Liang–Barsky clip of the infinite line through `p0` with
    /// direction `d`.
    fn liang_barsky(line: &EpipolarLine, w: usize, h: usize) -> Option<(Point2<f64>, Point2<f64>)> {
        let p0 = Point2::new(-line.a() * line.c(), -line.b() * line.c());
        let d = nalgebra::Vector2::new(-line.b(), line.a());
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (p, q) in [
            (-d.x, p0.x),
            (d.x, xmax - p0.x),
            (-d.y, p0.y),
            (d.y, ymax - p0.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        if t0 > t1 {
            return None;
        }
        let a = p0 + d * t0;
        let b = p0 + d * t1;
        Some(if lexicographic(&a, &b).is_le() { (a, b) } else { (b, a) })
    }

    #[test]
    fn map_validation() {
        assert!(FeatureMap::new(1, 4, 1, vec![0.0; 4]).is_err());
        assert!(FeatureMap::new(2, 2, 0, vec![]).is_err());
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureMap::new(2, 2, 1, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn clip_horizontal_line() {
        let l = EpipolarLine::new(Vector3::new(0.0, -1.0, 5.0)).unwrap();
        let seg = clip_line_to_image(&l, 10, 10).unwrap();
        assert_eq!(seg.start, Point2::new(0.0, 5.0));
        assert_eq!(seg.end, Point2::new(9.0, 5.0));
    }

    #[test]
    fn clip_misses_image() {
        let l = EpipolarLine::new(Vector3::new(0.0, -1.0, 20.0)).unwrap();
        assert_eq!(clip_line_to_image(&l, 10, 10), None);
    }

    #[test]
    fn clip_through_corner_only() {
        // x + y = 0 touches the rectangle only at the origin.
        let l = EpipolarLine::new(Vector3::new(1.0, 1.0, 0.0)).unwrap();
        let seg = clip_line_to_image(&l, 10, 10).unwrap();
        assert!(seg.start.coords.norm() < 1e-12);
        assert!(seg.length() < 1e-12);
    }

    #[test]
    fn clip_matches_liang_barsky() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut hits = 0;
        for _ in 0..5000 {
            let (w, h) = (rng.random_range(2..80), rng.random_range(2..80));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let through = Point2::new(rng.random_range(-20.0..100.0), rng.random_range(-20.0..100.0));
            let (a, b) = (theta.cos(), theta.sin());
            let l = EpipolarLine::new(Vector3::new(a, b, -(a * through.x + b * through.y))).unwrap();
            let got = clip_line_to_image(&l, w, h);
            let oracle = liang_barsky(&l, w, h);
            match (got, oracle) {
                (Some(seg), Some((s, e))) => {
                    hits += 1;
                    assert!((seg.start - s).norm() < 1e-12 * (1.0 + s.coords.norm()) * 10.0);
                    assert!((seg.end - e).norm() < 1e-12 * (1.0 + e.coords.norm()) * 10.0);
                }
                (None, None) => {}
                // Grazing contacts within round-off may be resolved either way.
                (Some(seg), None) => assert!(seg.length() < 1e-8),
                (None, Some((s, e))) => assert!((e - s).norm() < 1e-8),
            }
        }
        assert!(hits > 1000);
    }

    #[test]
    fn uniform_sample_spacing() {
        let seg = Segment2D {
            start: Point2::new(0.0, 0.0),
            end: Point2::new(9.0, 0.0),
        };
        let xs: Vec<f64> = sample_locations(&seg, 4).iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 3.0, 6.0, 9.0]);
        assert_eq!(sample_locations(&seg, 1), vec![Point2::new(4.5, 0.0)]);
        assert_eq!(DEFAULT_SAMPLES, 64);
    }

    #[test]
    fn degenerate_segment_repeats_point() {
        let p = Point2::new(5.0, 5.0);
        let seg = Segment2D { start: p, end: p };
        assert_eq!(sample_locations(&seg, 8), vec![p; 8]);
    }

    #[test]
    fn bilinear_exact_at_integers_and_mean_at_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let map = random_map(&mut rng, 10, 12, 3);
        assert_eq!(bilinear_sample(&map, &Point2::new(3.0, 7.0)), map.pixel(3, 7));
        assert_eq!(bilinear_sample(&map, &Point2::new(11.0, 9.0)), map.pixel(11, 9));
        let mid = bilinear_sample(&map, &Point2::new(3.5, 7.5));
        for c in 0..3 {
            let mean = (map.pixel(3, 7)[c] + map.pixel(4, 7)[c] + map.pixel(3, 8)[c] + map.pixel(4, 8)[c]) / 4.0;
            assert!((mid[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_clamps_out_of_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let map = random_map(&mut rng, 4, 4, 2);
        assert_eq!(bilinear_sample(&map, &Point2::new(-1.0, -3.0)), map.pixel(0, 0));
        assert_eq!(bilinear_sample(&map, &Point2::new(3.0 + 1e-12, 5.0)), map.pixel(3, 3));
    }

    #[test]
    fn rectified_samples_follow_query_row() {
        let reference = CameraView::new(
            Matrix3x4::new(10.0, 0.0, 4.5, 0.0, 0.0, 10.0, 4.5, 0.0, 0.0, 0.0, 1.0, 0.0),
            10,
            10,
        )
        .unwrap();
        let source = CameraView::new(
            Matrix3x4::new(10.0, 0.0, 4.5, -10.0, 0.0, 10.0, 4.5, 0.0, 0.0, 0.0, 1.0, 0.0),
            10,
            10,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let map = random_map(&mut rng, 10, 10, 4);
        let set = epipolar_samples(&map, &reference, &source, &Point2::new(4.0, 5.0), 16)
            .unwrap()
            .unwrap();
        assert_eq!(set.len(), 16);
        for (i, loc) in set.locations.iter().enumerate() {
            assert!((loc.y - 5.0).abs() < 1e-12);
            assert_eq!(set.feature(i), bilinear_sample(&map, loc).as_slice());
        }
        // A row below the image is skipped.
        let low = reference.clone();
        let shifted = CameraView::new(
            Matrix3x4::new(10.0, 0.0, 4.5, -10.0, 0.0, 10.0, 40.5, 0.0, 0.0, 0.0, 1.0, 0.0),
            10,
            10,
        )
        .unwrap();
        assert!(epipolar_samples(&map, &low, &shifted, &Point2::new(4.0, 5.0), 16)
            .unwrap()
            .is_none());
    }
}
