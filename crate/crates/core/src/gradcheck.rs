//! Central finite-difference check of [`transformer_backward`](crate::fusion::transformer_backward).
//!
//! The loss is `L = Σ R ⊙ F_fused` for a fixed random `R`, so `dL/dF_fused = R`.
//! Every entry of both feature maps and every parameter matrix is perturbed
//! by `±h` and the symmetric difference quotient is compared against the
//! analytic gradient. Only the forward pass is used to build the oracle.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{transformer_forward, ForwardOptions, FusionParams, FusionVariant, WeightMode};
use crate::geometry::CameraView;
use crate::sampler::FeatureMap;
use crate::synth::make_rig;

/// Largest `H·W·C·K` accepted.
pub const MAX_WORK: usize = 1_000_000;
/// Pass threshold on the maximum relative error.
pub const PASS_THRESHOLD: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 16,
            k: 8,
        }
    }
}

impl Dims {
    pub fn work(&self) -> usize {
        self.height
            .saturating_mul(self.width)
            .saturating_mul(self.channels)
            .saturating_mul(self.k)
    }
}

/// A randomly drawn fusion problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub reference_map: FeatureMap,
    pub source_map: FeatureMap,
    pub reference: CameraView,
    pub source: CameraView,
    pub params: FusionParams,
    pub k: usize,
    /// Loss weights, shaped like the reference map.
    pub loss_weights: Vec<f64>,
}

impl Problem {
    /// Two cameras 24° apart whose images are four times the map size.
    pub fn random(dims: Dims, variant: FusionVariant, mode: WeightMode, seed: u64) -> Result<Self> {
        if dims.work() > MAX_WORK {
            return Err(Error::DimsTooLarge(dims.work()));
        }
        if dims.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (4 * dims.width as u32, 4 * dims.height as u32);
        let rig = make_rig(2, 24.0, 2000.0, image, 2.0 * image.0 as f64, seed)?;
        let (h, w, c) = (dims.height, dims.width, dims.channels);
        let mut draw = |scale: f64| -> Result<FeatureMap> {
            FeatureMap::from_fn(h, w, c, |_, _, _| rng.random_range(-scale..scale))
        };
        let reference_map = draw(0.5)?;
        let source_map = draw(0.5)?;
        let loss_weights = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = FusionParams::random(variant, mode, c, seed.wrapping_add(1))?;
        let [reference, source]: [CameraView; 2] = rig.cameras.try_into().expect("two cameras");
        Ok(Self {
            reference_map,
            source_map,
            reference,
            source,
            params,
            k: dims.k,
            loss_weights,
        })
    }

    pub fn loss(&self, reference_map: &FeatureMap, source_map: &FeatureMap, params: &FusionParams) -> Result<f64> {
        let out = transformer_forward(
            reference_map,
            source_map,
            &self.reference,
            &self.source,
            params,
            self.k,
            ForwardOptions::default(),
        )?;
        Ok(out.fused.data().iter().zip(&self.loss_weights).map(|(a, b)| a * b).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Runs the finite-difference comparison with step `h`.
pub fn check(problem: &Problem, h: f64) -> Result<GradcheckReport> {
    let opts = ForwardOptions {
        record_weights: false,
        record_state: true,
    };
    let out = transformer_forward(
        &problem.reference_map,
        &problem.source_map,
        &problem.reference,
        &problem.source,
        &problem.params,
        problem.k,
        opts,
    )?;
    let (fh, fw, fc) = problem.reference_map.dims();
    let upstream = FeatureMap::new(fh, fw, fc, problem.loss_weights.clone())?;
    let grads = out.backward(&upstream)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
        passed: true,
    };
    let mut record = |name: &str, i: usize, analytic: f64, numeric: f64| {
        let e = relative_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = e;
            report.worst = (name.to_string(), i);
        }
    };

    for i in 0..problem.reference_map.data().len() {
        let numeric = central(h, |d| {
            let mut m = problem.reference_map.clone();
            m.data_mut()[i] += d;
            problem.loss(&m, &problem.source_map, &problem.params)
        })?;
        record("reference", i, grads.reference[i], numeric);
    }
    for i in 0..problem.source_map.data().len() {
        let numeric = central(h, |d| {
            let mut m = problem.source_map.clone();
            m.data_mut()[i] += d;
            problem.loss(&problem.reference_map, &m, &problem.params)
        })?;
        record("source", i, grads.source[i], numeric);
    }
    let params = &problem.params;
    let mut check_matrix = |name: &str,
                            analytic: &DMatrix<f64>,
                            perturb: &dyn Fn(&mut FusionParams) -> &mut DMatrix<f64>|
     -> Result<()> {
        for i in 0..analytic.len() {
            let numeric = central(h, |d| {
                let mut p = params.clone();
                perturb(&mut p)[i] += d;
                problem.loss(&problem.reference_map, &problem.source_map, &p)
            })?;
            record(name, i, analytic[i], numeric);
        }
        Ok(())
    };
    check_matrix("w_z", &grads.w_z, &|p| &mut p.w_z)?;
    if let (Some(t), Some(ph), Some(g)) = (&grads.theta, &grads.phi, &grads.g) {
        check_matrix("theta", t, &|p| &mut p.embeddings.as_mut().expect("bottleneck").theta)?;
        check_matrix("phi", ph, &|p| &mut p.embeddings.as_mut().expect("bottleneck").phi)?;
        check_matrix("g", g, &|p| &mut p.embeddings.as_mut().expect("bottleneck").g)?;
    }
    report.passed = report.max_rel_error < PASS_THRESHOLD;
    Ok(report)
}

fn central(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}
