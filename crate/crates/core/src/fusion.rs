//! Attention fusion along epipolar lines.
//!
//! For a reference pixel with feature `q` and `K` source samples `s_i`, the
//! fusion module computes similarity logits, turns them into weights, blends
//! the samples and adds the result back onto `q` through a learned map:
//!
//! * **Identity Gaussian**: `zᵢ = q·sᵢ`, `out = q + W_z Σ wᵢ sᵢ` with `W_z`
//!   a `C × C` matrix.
//! * **Bottleneck Embedded Gaussian**: `zᵢ = (θᵀq)·(φᵀsᵢ)`,
//!   `v = Σ wᵢ gᵀsᵢ ∈ ℝ^{C/2}`, `out = q + W_zᵀ v` with `W_z` of shape
//!   `C/2 × C`.
//!
//! Weights are either a softmax over the logits or a one-hot selection of the
//! largest logit. Logits are divided by `temperature`, which defaults to 1.
//! Pixels whose epipolar line misses the source image pass through unchanged.
//!
//! [`transformer_forward`] can record everything needed to run
//! [`transformer_backward`], which returns exact gradients with respect to
//! both feature maps and every parameter matrix.

use nalgebra::{DMatrix, Point2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::sampler::{BilinearFootprint, EpipolarSampleSet, FeatureMap, SamplerGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionVariant {
    #[serde(rename = "identity")]
    IdentityGaussian,
    #[serde(rename = "bottleneck")]
    BottleneckEmbeddedGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Softmax,
    Max,
}

/// `θ`, `φ` and `g`, each `C × C/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

/// Learnable state of the fusion module.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub variant: FusionVariant,
    pub mode: WeightMode,
    pub temperature: f64,
    /// `C × C` (identity) or `C/2 × C` (bottleneck).
    pub w_z: DMatrix<f64>,
    /// Present exactly for the bottleneck variant.
    pub embeddings: Option<Embeddings>,
}

impl FusionParams {
    pub fn identity(mode: WeightMode, w_z: DMatrix<f64>) -> Result<Self> {
        let p = Self {
            variant: FusionVariant::IdentityGaussian,
            mode,
            temperature: 1.0,
            w_z,
            embeddings: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn bottleneck(mode: WeightMode, w_z: DMatrix<f64>, embeddings: Embeddings) -> Result<Self> {
        let p = Self {
            variant: FusionVariant::BottleneckEmbeddedGaussian,
            mode,
            temperature: 1.0,
            w_z,
            embeddings: Some(embeddings),
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero `W_z` and embeddings drawn from `U(−1/√C, 1/√C)`. Inserting the
    /// module with these parameters leaves the reference features unchanged.
    pub fn seeded(variant: FusionVariant, mode: WeightMode, channels: usize, seed: u64) -> Result<Self> {
        let mut p = Self::random(variant, mode, channels, seed)?;
        p.w_z.fill(0.0);
        Ok(p)
    }

    /// Every matrix drawn from `U(−1/√C, 1/√C)`.
    pub fn random(variant: FusionVariant, mode: WeightMode, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (channels.max(1) as f64).sqrt();
        let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound));
        match variant {
            FusionVariant::IdentityGaussian => Self::identity(mode, draw(channels, channels)),
            FusionVariant::BottleneckEmbeddedGaussian => {
                if !channels.is_multiple_of(2) {
                    return Err(Error::OddChannels(channels));
                }
                let h = channels / 2;
                let embeddings = Embeddings {
                    theta: draw(channels, h),
                    phi: draw(channels, h),
                    g: draw(channels, h),
                };
                Self::bottleneck(mode, draw(h, channels), embeddings)
            }
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.w_z.ncols()
    }

    /// Checks shapes against the declared variant and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let c = self.w_z.ncols();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        match (self.variant, &self.embeddings) {
            (FusionVariant::IdentityGaussian, None) => {
                if self.w_z.nrows() != c || c == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "identity W_z must be square, got {}×{}",
                        self.w_z.nrows(),
                        c
                    )));
                }
            }
            (FusionVariant::BottleneckEmbeddedGaussian, Some(e)) => {
                if !c.is_multiple_of(2) {
                    return Err(Error::OddChannels(c));
                }
                let h = c / 2;
                if self.w_z.nrows() != h || c == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "bottleneck W_z must be {h}×{c}, got {}×{c}",
                        self.w_z.nrows()
                    )));
                }
                for (name, m) in [("theta", &e.theta), ("phi", &e.phi), ("g", &e.g)] {
                    if m.shape() != (c, h) {
                        return Err(Error::ShapeMismatch(format!(
                            "{name} must be {c}×{h}, got {}×{}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                    if !finite(m) {
                        return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
                    }
                }
            }
            (FusionVariant::IdentityGaussian, Some(_)) => {
                return Err(Error::ShapeMismatch("identity variant takes no embeddings".into()))
            }
            (FusionVariant::BottleneckEmbeddedGaussian, None) => {
                return Err(Error::ShapeMismatch("bottleneck variant requires embeddings".into()))
            }
        }
        if !finite(&self.w_z) {
            return Err(Error::InvalidArgument("W_z has non-finite entries".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = m · v` for `m` of shape `r × c` and `v` of length `c`.
fn mat_vec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (j, &vj) in v.iter().enumerate() {
        for (o, mij) in out.iter_mut().zip(m.column(j).iter()) {
            *o += mij * vj;
        }
    }
}

/// `out = mᵀ · v` for `m` of shape `r × c` and `v` of length `r`.
fn mat_t_vec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(m.column(j).as_slice(), v);
    }
}

/// Weights from raw logits. Softmax subtracts the maximum logit first; max
/// mode is one-hot at the first largest logit.
pub fn weights_from_logits(logits: &[f64], mode: WeightMode) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let (arg, &max) = logits
        .iter()
        .enumerate()
        .fold((0, &logits[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
    match mode {
        WeightMode::Softmax => {
            let mut w: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            w
        }
        WeightMode::Max => {
            let mut w = vec![0.0; logits.len()];
            w[arg] = 1.0;
            w
        }
    }
}

/// Dot-product similarity of `query` against each row of `samples` (`K × C`),
/// normalized into weights.
pub fn similarity_weights(query: &[f64], samples: &[f64], mode: WeightMode) -> Vec<f64> {
    let logits: Vec<f64> = samples.chunks_exact(query.len()).map(|s| dot(query, s)).collect();
    weights_from_logits(&logits, mode)
}

/// `Σᵢ wᵢ sᵢ` over the rows of `samples` (`K × C`).
pub fn aggregate(weights: &[f64], samples: &[f64], channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (w, s) in weights.iter().zip(samples.chunks_exact(channels)) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    out
}

/// Residual fusion `ref + W_z·agg` (identity variant).
pub fn fuse_identity(ref_feat: &[f64], agg: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    if params.variant != FusionVariant::IdentityGaussian {
        return Err(Error::ShapeMismatch("fuse_identity needs the identity variant".into()));
    }
    let c = params.channels();
    if ref_feat.len() != c || agg.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "expected {c} channels, got reference {} and aggregate {}",
            ref_feat.len(),
            agg.len()
        )));
    }
    let mut out = vec![0.0; c];
    mat_vec(&params.w_z, agg, &mut out);
    for (o, r) in out.iter_mut().zip(ref_feat) {
        *o += r;
    }
    Ok(out)
}

/// Bottleneck fusion of one reference feature with `K × C` samples.
pub fn fuse_bottleneck(ref_feat: &[f64], samples: &[f64], params: &FusionParams) -> Result<Vec<f64>> {
    if params.variant != FusionVariant::BottleneckEmbeddedGaussian {
        return Err(Error::ShapeMismatch("fuse_bottleneck needs the bottleneck variant".into()));
    }
    let c = params.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::OddChannels(c));
    }
    check_pixel_shapes(ref_feat, samples, c)?;
    Ok(attend_pixel(ref_feat, samples, params).output)
}

fn check_pixel_shapes(ref_feat: &[f64], samples: &[f64], c: usize) -> Result<()> {
    if ref_feat.len() != c || samples.is_empty() || !samples.len().is_multiple_of(c) {
        return Err(Error::ShapeMismatch(format!(
            "expected {c}-channel reference and K×{c} samples, got {} and {}",
            ref_feat.len(),
            samples.len()
        )));
    }
    Ok(())
}

/// Everything computed for one query pixel.
#[derive(Debug, Clone)]
struct PixelForward {
    /// Raw similarity scores before temperature scaling.
    scores: Vec<f64>,
    weights: Vec<f64>,
    output: Vec<f64>,
    /// Identity: aggregated sample (`C`). Bottleneck: blended value `v` (`C/2`).
    blended: Vec<f64>,
    /// Bottleneck only: `θᵀq`, `φᵀsᵢ` (`K × C/2`), `gᵀsᵢ` (`K × C/2`).
    query_embed: Vec<f64>,
    key_embed: Vec<f64>,
    value_embed: Vec<f64>,
}

fn attend_pixel(q: &[f64], samples: &[f64], params: &FusionParams) -> PixelForward {
    let c = q.len();
    let k = samples.len() / c;
    let inv_t = 1.0 / params.temperature;
    match (params.variant, &params.embeddings) {
        (FusionVariant::BottleneckEmbeddedGaussian, Some(e)) => {
            let h = c / 2;
            let mut query_embed = vec![0.0; h];
            mat_t_vec(&e.theta, q, &mut query_embed);
            let mut key_embed = vec![0.0; k * h];
            let mut value_embed = vec![0.0; k * h];
            for ((s, key), val) in samples
                .chunks_exact(c)
                .zip(key_embed.chunks_exact_mut(h))
                .zip(value_embed.chunks_exact_mut(h))
            {
                mat_t_vec(&e.phi, s, key);
                mat_t_vec(&e.g, s, val);
            }
            let scores: Vec<f64> = key_embed.chunks_exact(h).map(|b| dot(&query_embed, b)).collect();
            let logits: Vec<f64> = scores.iter().map(|z| z * inv_t).collect();
            let weights = weights_from_logits(&logits, params.mode);
            let blended = aggregate(&weights, &value_embed, h);
            let mut output = vec![0.0; c];
            mat_t_vec(&params.w_z, &blended, &mut output);
            for (o, r) in output.iter_mut().zip(q) {
                *o += r;
            }
            PixelForward {
                scores,
                weights,
                output,
                blended,
                query_embed,
                key_embed,
                value_embed,
            }
        }
        _ => {
            let scores: Vec<f64> = samples.chunks_exact(c).map(|s| dot(q, s)).collect();
            let logits: Vec<f64> = scores.iter().map(|z| z * inv_t).collect();
            let weights = weights_from_logits(&logits, params.mode);
            let blended = aggregate(&weights, samples, c);
            let mut output = vec![0.0; c];
            mat_vec(&params.w_z, &blended, &mut output);
            for (o, r) in output.iter_mut().zip(q) {
                *o += r;
            }
            PixelForward {
                scores,
                weights,
                output,
                blended,
                query_embed: Vec::new(),
                key_embed: Vec::new(),
                value_embed: Vec::new(),
            }
        }
    }
}

/// Attention of one query feature over one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// Similarity score per sample before temperature scaling.
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// Fused feature, `C` values.
    pub output: Vec<f64>,
}

/// Runs the configured fusion for a single query.
pub fn attend(query: &[f64], samples: &EpipolarSampleSet, params: &FusionParams) -> Result<Attention> {
    let c = params.channels();
    if samples.channels != c {
        return Err(Error::ChannelMismatch {
            reference: c,
            src: samples.channels,
        });
    }
    check_pixel_shapes(query, &samples.features, c)?;
    let f = attend_pixel(query, &samples.features, params);
    Ok(Attention {
        scores: f.scores,
        weights: f.weights,
        output: f.output,
    })
}

/// Sample locations and weights kept for one reference pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelRecord {
    /// Locations in source feature-map pixels.
    pub locations: Vec<Point2<f64>>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep per-pixel sample locations and weights (`H·W·K` memory).
    pub record_weights: bool,
    /// Keep what [`transformer_backward`] needs.
    pub record_state: bool,
}

#[derive(Debug, Clone)]
struct PixelState {
    footprints: Vec<BilinearFootprint>,
    samples: Vec<f64>,
    forward: PixelForward,
}

/// Saved forward computation.
#[derive(Debug, Clone)]
pub struct ForwardState {
    reference: FeatureMap,
    src_dims: (usize, usize, usize),
    params: FusionParams,
    /// Row-major over reference pixels; `None` for skipped queries.
    pixels: Vec<Option<PixelState>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fused: FeatureMap,
    /// Row-major over reference pixels when requested; `None` entries are skipped queries.
    pub records: Option<Vec<Option<PixelRecord>>>,
    pub state: Option<ForwardState>,
}

impl ForwardOutput {
    pub fn record(&self, x: usize, y: usize) -> Option<&PixelRecord> {
        let w = self.fused.width();
        self.records.as_ref()?.get(y * w + x)?.as_ref()
    }

    pub fn backward(&self, grad_fused: &FeatureMap) -> Result<Gradients> {
        transformer_backward(self.state.as_ref(), grad_fused)
    }
}

struct RowOutput {
    values: Vec<f64>,
    records: Vec<Option<PixelRecord>>,
    states: Vec<Option<PixelState>>,
}

/// Fuses every pixel of `reference_map` with features sampled along its
/// epipolar line in `source_map`.
///
/// Cameras are given at image resolution and rescaled to the resolution of
/// each feature map. The output has the shape of `reference_map`.
pub fn transformer_forward(
    reference_map: &FeatureMap,
    source_map: &FeatureMap,
    reference: &CameraView,
    source: &CameraView,
    params: &FusionParams,
    k: usize,
    options: ForwardOptions,
) -> Result<ForwardOutput> {
    params.validate()?;
    let c = reference_map.channels();
    if source_map.channels() != c {
        return Err(Error::ChannelMismatch {
            reference: c,
            src: source_map.channels(),
        });
    }
    if params.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "parameters expect {} channels, maps have {c}",
            params.channels()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let geometry = SamplerGeometry::for_maps(
        reference,
        source,
        (reference_map.width(), reference_map.height()),
        (source_map.width(), source_map.height()),
    )?;
    let (h, w) = (reference_map.height(), reference_map.width());

    let rows: Vec<RowOutput> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut values = Vec::with_capacity(w * c);
            let mut records = Vec::new();
            let mut states = Vec::new();
            for x in 0..w {
                let q = reference_map.pixel(x, y);
                let p = Point2::new(x as f64, y as f64);
                match geometry.sample(source_map, &p, k) {
                    None => {
                        values.extend_from_slice(q);
                        if options.record_weights {
                            records.push(None);
                        }
                        if options.record_state {
                            states.push(None);
                        }
                    }
                    Some(set) => {
                        let f = attend_pixel(q, &set.features, params);
                        values.extend_from_slice(&f.output);
                        if options.record_weights {
                            records.push(Some(PixelRecord {
                                locations: set.locations.clone(),
                                weights: f.weights.clone(),
                                scores: f.scores.clone(),
                            }));
                        }
                        if options.record_state {
                            let footprints = set
                                .locations
                                .iter()
                                .map(|loc| BilinearFootprint::new(source_map.width(), source_map.height(), loc))
                                .collect();
                            states.push(Some(PixelState {
                                footprints,
                                samples: set.features,
                                forward: f,
                            }));
                        }
                    }
                }
            }
            RowOutput {
                values,
                records,
                states,
            }
        })
        .collect();

    let mut data = Vec::with_capacity(h * w * c);
    let mut records = options.record_weights.then(|| Vec::with_capacity(h * w));
    let mut states = options.record_state.then(|| Vec::with_capacity(h * w));
    for row in rows {
        data.extend(row.values);
        if let Some(r) = records.as_mut() {
            r.extend(row.records);
        }
        if let Some(s) = states.as_mut() {
            s.extend(row.states);
        }
    }
    let fused = FeatureMap::new(h, w, c, data)?;
    let state = states.map(|pixels| ForwardState {
        reference: reference_map.clone(),
        src_dims: source_map.dims(),
        params: params.clone(),
        pixels,
    });
    Ok(ForwardOutput {
        fused,
        records,
        state,
    })
}

/// Gradients of a scalar loss with respect to every input of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as the reference map.
    pub reference: Vec<f64>,
    /// Same layout as the source map.
    pub source: Vec<f64>,
    pub w_z: DMatrix<f64>,
    pub theta: Option<DMatrix<f64>>,
    pub phi: Option<DMatrix<f64>>,
    pub g: Option<DMatrix<f64>>,
}

struct RowGrad {
    reference: Vec<f64>,
    /// Per recorded pixel of the row, `dL/dsᵢ` for its samples (`K × C`).
    sample_grads: Vec<(usize, Vec<f64>)>,
    w_z: DMatrix<f64>,
    theta: Option<DMatrix<f64>>,
    phi: Option<DMatrix<f64>>,
    g: Option<DMatrix<f64>>,
}

/// Rows whose source-gradient contributions are buffered before being
/// scattered in row order.
const BACKWARD_ROW_BLOCK: usize = 8;

/// Backpropagates `dL/dF_fused` through a recorded forward pass.
///
/// With max weighting the selection is treated as constant, so gradients flow
/// only through the selected sample and `W_z`.
pub fn transformer_backward(state: Option<&ForwardState>, grad_fused: &FeatureMap) -> Result<Gradients> {
    let state = state.ok_or(Error::StateMissing)?;
    let (h, w, c) = state.reference.dims();
    if grad_fused.dims() != (h, w, c) {
        return Err(Error::ShapeMismatch(format!(
            "gradient is {:?}, fused map is {:?}",
            grad_fused.dims(),
            (h, w, c)
        )));
    }
    let params = &state.params;
    let (src_h, src_w, _) = state.src_dims;
    let bottleneck = params.variant == FusionVariant::BottleneckEmbeddedGaussian;
    let half = c / 2;

    let mut grads = Gradients {
        reference: vec![0.0; h * w * c],
        source: vec![0.0; src_h * src_w * c],
        w_z: DMatrix::zeros(params.w_z.nrows(), params.w_z.ncols()),
        theta: bottleneck.then(|| DMatrix::zeros(c, half)),
        phi: bottleneck.then(|| DMatrix::zeros(c, half)),
        g: bottleneck.then(|| DMatrix::zeros(c, half)),
    };

    let rows: Vec<usize> = (0..h).collect();
    for block in rows.chunks(BACKWARD_ROW_BLOCK) {
        let partials: Vec<RowGrad> = block
            .par_iter()
            .map(|&y| backward_row(state, grad_fused, y))
            .collect();
        for (&y, row) in block.iter().zip(partials) {
            grads.reference[y * w * c..(y + 1) * w * c].copy_from_slice(&row.reference);
            for (x, ds) in &row.sample_grads {
                let px = state.pixels[y * w + x].as_ref().expect("recorded pixel");
                for (fp, d) in px.footprints.iter().zip(ds.chunks_exact(c)) {
                    for (&(sx, sy), &bw) in fp.pixels.iter().zip(&fp.weights) {
                        let o = (sy * src_w + sx) * c;
                        for (g, v) in grads.source[o..o + c].iter_mut().zip(d) {
                            *g += bw * v;
                        }
                    }
                }
            }
            grads.w_z += &row.w_z;
            for (acc, part) in [
                (&mut grads.theta, &row.theta),
                (&mut grads.phi, &row.phi),
                (&mut grads.g, &row.g),
            ] {
                if let (Some(acc), Some(part)) = (acc.as_mut(), part.as_ref()) {
                    *acc += part;
                }
            }
        }
    }
    Ok(grads)
}

/// Softmax backward: `dz = w ⊙ (dw − Σ w·dw)`. Zero in max mode.
fn logit_grads(weights: &[f64], dw: &[f64], mode: WeightMode, inv_t: f64) -> Vec<f64> {
    match mode {
        WeightMode::Max => vec![0.0; weights.len()],
        WeightMode::Softmax => {
            let mean = dot(weights, dw);
            weights
                .iter()
                .zip(dw)
                .map(|(w, d)| w * (d - mean) * inv_t)
                .collect()
        }
    }
}

fn backward_row(state: &ForwardState, grad_fused: &FeatureMap, y: usize) -> RowGrad {
    let params = &state.params;
    let (_, w, c) = state.reference.dims();
    let half = c / 2;
    let inv_t = 1.0 / params.temperature;
    let bottleneck = params.variant == FusionVariant::BottleneckEmbeddedGaussian;
    let mut row = RowGrad {
        reference: grad_fused.data()[y * w * c..(y + 1) * w * c].to_vec(),
        sample_grads: Vec::new(),
        w_z: DMatrix::zeros(params.w_z.nrows(), params.w_z.ncols()),
        theta: bottleneck.then(|| DMatrix::zeros(c, half)),
        phi: bottleneck.then(|| DMatrix::zeros(c, half)),
        g: bottleneck.then(|| DMatrix::zeros(c, half)),
    };

    for x in 0..w {
        let Some(px) = state.pixels[y * w + x].as_ref() else {
            continue;
        };
        let upstream = grad_fused.pixel(x, y);
        let q = state.reference.pixel(x, y);
        let f = &px.forward;
        let k = f.weights.len();
        let d_ref = &mut row.reference[x * c..(x + 1) * c];
        let mut d_samples = vec![0.0; k * c];

        match (&params.embeddings, bottleneck) {
            (Some(e), true) => {
                // v = Σ wᵢ eᵢ, out = q + W_zᵀ v.
                let mut dv = vec![0.0; half];
                mat_vec(&params.w_z, upstream, &mut dv);
                for (kk, &vk) in f.blended.iter().enumerate() {
                    for (j, &gj) in upstream.iter().enumerate() {
                        row.w_z[(kk, j)] += vk * gj;
                    }
                }
                let dw: Vec<f64> = f.value_embed.chunks_exact(half).map(|ei| dot(&dv, ei)).collect();
                let dz = logit_grads(&f.weights, &dw, params.mode, inv_t);

                // zᵢ = a·bᵢ with a = θᵀq, bᵢ = φᵀsᵢ, eᵢ = gᵀsᵢ.
                let mut da = vec![0.0; half];
                let d_theta = row.theta.as_mut().expect("bottleneck");
                let d_phi = row.phi.as_mut().expect("bottleneck");
                let d_g = row.g.as_mut().expect("bottleneck");
                for i in 0..k {
                    let s = &px.samples[i * c..(i + 1) * c];
                    let b = &f.key_embed[i * half..(i + 1) * half];
                    let db: Vec<f64> = f.query_embed.iter().map(|a| dz[i] * a).collect();
                    let de: Vec<f64> = dv.iter().map(|d| f.weights[i] * d).collect();
                    for (a, bj) in da.iter_mut().zip(b) {
                        *a += dz[i] * bj;
                    }
                    let ds = &mut d_samples[i * c..(i + 1) * c];
                    for (r, &sr) in s.iter().enumerate() {
                        for j in 0..half {
                            d_phi[(r, j)] += sr * db[j];
                            d_g[(r, j)] += sr * de[j];
                        }
                        ds[r] = dot(e.phi.row(r).transpose().as_slice(), &db)
                            + dot(e.g.row(r).transpose().as_slice(), &de);
                    }
                }
                for (r, &qr) in q.iter().enumerate() {
                    for j in 0..half {
                        d_theta[(r, j)] += qr * da[j];
                    }
                    d_ref[r] += dot(e.theta.row(r).transpose().as_slice(), &da);
                }
            }
            _ => {
                // agg = Σ wᵢ sᵢ, out = q + W_z agg, zᵢ = q·sᵢ.
                for (j, &aj) in f.blended.iter().enumerate() {
                    for (r, &gr) in upstream.iter().enumerate() {
                        row.w_z[(r, j)] += gr * aj;
                    }
                }
                let mut d_agg = vec![0.0; c];
                mat_t_vec(&params.w_z, upstream, &mut d_agg);
                let dw: Vec<f64> = px.samples.chunks_exact(c).map(|s| dot(&d_agg, s)).collect();
                let dz = logit_grads(&f.weights, &dw, params.mode, inv_t);
                for i in 0..k {
                    let s = &px.samples[i * c..(i + 1) * c];
                    let ds = &mut d_samples[i * c..(i + 1) * c];
                    for r in 0..c {
                        ds[r] = f.weights[i] * d_agg[r] + dz[i] * q[r];
                        d_ref[r] += dz[i] * s[r];
                    }
                }
            }
        }
        row.sample_grads.push((x, d_samples));
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_rig;

    fn rng_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn singleton_weights_are_one() {
        for mode in [WeightMode::Softmax, WeightMode::Max] {
            assert_eq!(similarity_weights(&[1.0, 2.0], &[3.0, -1.0], mode), vec![1.0]);
        }
    }

    #[test]
    fn identical_samples_give_uniform_weights() {
        let w = similarity_weights(&[0.3, -0.2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], WeightMode::Softmax);
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..100 {
            let q = rng_vec(&mut rng, 6, 1.0);
            let s = rng_vec(&mut rng, 8 * 6, 1.0);
            let w = similarity_weights(&q, &s, WeightMode::Softmax);
            let exps: Vec<f64> = (0..8)
                .map(|i| (0..6).map(|j| q[j] * s[i * 6 + j]).sum::<f64>().exp())
                .collect();
            let total: f64 = exps.iter().sum();
            for (a, e) in w.iter().zip(&exps) {
                assert!((a - e / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_mode_ties_pick_lowest_index() {
        assert_eq!(weights_from_logits(&[1.0, 3.0, 3.0, 2.0], WeightMode::Max), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_one_hot_and_uniform() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(aggregate(&[0.0, 1.0, 0.0], &s, 2), vec![3.0, 4.0]);
        let mean = aggregate(&[1.0 / 3.0; 3], &s, 2);
        assert!((mean[0] - 3.0).abs() < 1e-15 && (mean[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_matches_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = rng_vec(&mut rng, 5 * 4, 1.0);
        let w = weights_from_logits(&rng_vec(&mut rng, 5, 2.0), WeightMode::Softmax);
        let got = aggregate(&w, &s, 4);
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += w[i] * s[i * 4 + j];
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_fusion_residual() {
        let c = 3;
        let r = vec![1.0, -2.0, 0.5];
        let zero = FusionParams::identity(WeightMode::Softmax, DMatrix::zeros(c, c)).unwrap();
        assert_eq!(fuse_identity(&r, &[4.0, 5.0, 6.0], &zero).unwrap(), r);
        let eye = FusionParams::identity(WeightMode::Softmax, DMatrix::identity(c, c)).unwrap();
        assert_eq!(fuse_identity(&r, &[0.0; 3], &eye).unwrap(), r);
        assert!(matches!(fuse_identity(&r, &[0.0; 2], &eye), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn identity_fusion_matches_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let p = FusionParams::random(FusionVariant::IdentityGaussian, WeightMode::Softmax, 4, 1).unwrap();
        let r = rng_vec(&mut rng, 4, 1.0);
        let a = rng_vec(&mut rng, 4, 1.0);
        let got = fuse_identity(&r, &a, &p).unwrap();
        for i in 0..4 {
            let expected = r[i] + (0..4).map(|j| p.w_z[(i, j)] * a[j]).sum::<f64>();
            assert!((got[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bottleneck_zero_residual_and_singleton() {
        let c = 4;
        let mut selector = DMatrix::zeros(c, c / 2);
        selector.fill_with_identity();
        let e = Embeddings {
            theta: selector.clone(),
            phi: selector.clone(),
            g: selector,
        };
        let p = FusionParams::bottleneck(WeightMode::Softmax, DMatrix::zeros(c / 2, c), e).unwrap();
        let r = vec![1.0, 2.0, 3.0, 4.0];
        let s = vec![0.5; 3 * c];
        assert_eq!(fuse_bottleneck(&r, &s, &p).unwrap(), r);

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = FusionParams::random(FusionVariant::BottleneckEmbeddedGaussian, WeightMode::Softmax, c, 3).unwrap();
        let s0 = rng_vec(&mut rng, c, 1.0);
        let got = fuse_bottleneck(&r, &s0, &p).unwrap();
        let e = p.embeddings.as_ref().unwrap();
        for j in 0..c {
            let up: f64 = (0..c / 2)
                .map(|k| p.w_z[(k, j)] * (0..c).map(|i| e.g[(i, k)] * s0[i]).sum::<f64>())
                .sum();
            assert!((got[j] - (r[j] + up)).abs() < 1e-12);
        }
    }

    #[test]
    fn bottleneck_matches_scalar_evaluation() {
        let (c, k) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = FusionParams::random(FusionVariant::BottleneckEmbeddedGaussian, WeightMode::Softmax, c, 5).unwrap();
        let e = p.embeddings.as_ref().unwrap();
        let r = rng_vec(&mut rng, c, 1.0);
        let s = rng_vec(&mut rng, k * c, 1.0);
        let got = fuse_bottleneck(&r, &s, &p).unwrap();

        let h = c / 2;
        let mut a = [0.0; 2];
        for j in 0..h {
            for i in 0..c {
                a[j] += e.theta[(i, j)] * r[i];
            }
        }
        let mut logits = [0.0; 3];
        let mut vals = [[0.0; 2]; 3];
        for n in 0..k {
            for j in 0..h {
                let mut b = 0.0;
                for i in 0..c {
                    b += e.phi[(i, j)] * s[n * c + i];
                    vals[n][j] += e.g[(i, j)] * s[n * c + i];
                }
                logits[n] += a[j] * b;
            }
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let ex: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let tot: f64 = ex.iter().sum();
        let mut v = [0.0; 2];
        for n in 0..k {
            for j in 0..h {
                v[j] += ex[n] / tot * vals[n][j];
            }
        }
        for i in 0..c {
            let mut out = r[i];
            for j in 0..h {
                out += p.w_z[(j, i)] * v[j];
            }
            assert!((got[i] - out).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_channels_rejected() {
        assert_eq!(
            FusionParams::random(FusionVariant::BottleneckEmbeddedGaussian, WeightMode::Softmax, 5, 0).unwrap_err(),
            Error::OddChannels(5)
        );
    }

    #[test]
    fn max_is_limit_of_sharpened_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let logits = rng_vec(&mut rng, 8, 1.0);
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] < 5e-3 {
                continue;
            }
            let hard = weights_from_logits(&logits, WeightMode::Max);
            let sharp: Vec<f64> = logits.iter().map(|z| z * 1e4).collect();
            let soft = weights_from_logits(&sharp, WeightMode::Softmax);
            for (a, b) in hard.iter().zip(&soft) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_without_state_fails() {
        let g = FeatureMap::zeros(2, 2, 1).unwrap();
        assert_eq!(transformer_backward(None, &g).unwrap_err(), Error::StateMissing);
    }

    #[test]
    fn zero_residual_forward_is_bit_identical() {
        let rig = make_rig(2, 24.0, 2000.0, (64, 48), 80.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let fref = FeatureMap::from_fn(12, 16, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let fsrc = FeatureMap::from_fn(12, 16, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        for variant in [FusionVariant::IdentityGaussian, FusionVariant::BottleneckEmbeddedGaussian] {
            let p = FusionParams::seeded(variant, WeightMode::Softmax, 4, 1).unwrap();
            let out = transformer_forward(&fref, &fsrc, &rig.cameras[0], &rig.cameras[1], &p, 8, ForwardOptions::default())
                .unwrap();
            assert_eq!(out.fused, fref);
        }
    }

    #[test]
    fn loss_sum_gradient_at_zero_residual() {
        let rig = make_rig(2, 24.0, 2000.0, (64, 48), 80.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let fref = FeatureMap::from_fn(12, 16, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let fsrc = FeatureMap::from_fn(12, 16, 4, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let p = FusionParams::seeded(FusionVariant::IdentityGaussian, WeightMode::Softmax, 4, 1).unwrap();
        let opts = ForwardOptions {
            record_weights: true,
            record_state: true,
        };
        let out = transformer_forward(&fref, &fsrc, &rig.cameras[0], &rig.cameras[1], &p, 8, opts).unwrap();
        let ones = FeatureMap::new(12, 16, 4, vec![1.0; 12 * 16 * 4]).unwrap();
        let g = out.backward(&ones).unwrap();
        assert!(g.reference.iter().all(|&v| v == 1.0));
        assert!(g.source.iter().all(|&v| v == 0.0));

        // dL/dW_z[r][j] = Σ_p agg_j(p), identical for every row r.
        let mut agg_sum = [0.0; 4];
        for y in 0..12 {
            for x in 0..16 {
                if let Some(rec) = out.record(x, y) {
                    let set = crate::sampler::read_samples(
                        &fsrc,
                        crate::geometry::EpipolarLine::new(nalgebra::Vector3::new(1.0, 0.0, 0.0)).unwrap(),
                        crate::sampler::Segment2D {
                            start: rec.locations[0],
                            end: *rec.locations.last().unwrap(),
                        },
                        rec.locations.clone(),
                    );
                    let agg = aggregate(&rec.weights, &set.features, 4);
                    for j in 0..4 {
                        agg_sum[j] += agg[j];
                    }
                }
            }
        }
        for r in 0..4 {
            for j in 0..4 {
                assert!((g.w_z[(r, j)] - agg_sum[j]).abs() < 1e-9);
            }
        }
    }
}
