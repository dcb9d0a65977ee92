//! Activation maps over the spatial grid and per-superpixel importance scores.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBundle, Prediction};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::superpixels::{occlude_except, Segmentation};
use crate::types::{ActivationMap, FeatureMap3D, ImageTensor, LatentVector, Matrix, SpatialCell};

/// How a spatial activation map is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Cam,
    Fam,
    Random,
}

impl std::fmt::Display for MapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapKind::Cam => "cam",
            MapKind::Fam => "fam",
            MapKind::Random => "random",
        })
    }
}

/// A map method bound to the class it explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyMethod {
    pub kind: MapKind,
    pub target_class: usize,
    /// Only used by [`MapKind::Random`].
    pub seed: u64,
}

impl SaliencyMethod {
    pub fn map(&self, prediction: &Prediction, weights: &Matrix<f32>) -> Result<ActivationMap<f32>> {
        if self.target_class >= weights.cols() {
            return Err(Error::Bounds(format!(
                "target class {} but model has {} classes",
                self.target_class,
                weights.cols()
            )));
        }
        let conv = prediction
            .conv_features
            .as_ref()
            .ok_or_else(|| Error::Contract("activation maps need `conv_features`".into()))?;
        match self.kind {
            MapKind::Cam => cam(conv, weights, self.target_class),
            MapKind::Fam => fam(conv, &prediction.latent, weights, self.target_class),
            MapKind::Random => Ok(random_map(conv.spatial_shape(), self.seed)),
        }
    }
}

fn check_head<T: Scalar>(c: &FeatureMap3D<T>, weights: &Matrix<T>, class: usize) -> Result<()> {
    if weights.rows() != c.depth() {
        return Err(Error::dim("final weight rows vs feature channels", c.depth(), weights.rows()));
    }
    if class >= weights.cols() {
        return Err(Error::Bounds(format!("class {class} >= {}", weights.cols())));
    }
    Ok(())
}

/// Class activation map: `M[i,j] = sum_d W[d,c] * C[i,j,d]`.
pub fn cam<T: Scalar>(c: &FeatureMap3D<T>, weights: &Matrix<T>, class: usize) -> Result<ActivationMap<T>> {
    check_head(c, weights, class)?;
    let column: Vec<T> = (0..c.depth()).map(|d| weights.get(d, class)).collect();
    let values = (0..c.height() * c.width())
        .map(|p| {
            let cell = c.cell(p / c.width(), p % c.width());
            T::sum_iter(cell.iter().zip(&column).map(|(a, w)| *a * *w))
        })
        .collect();
    ActivationMap::new(values, c.height(), c.width())
}

/// Feature activation map: each channel's logit contribution `x[d] * W[d,c]`
/// spread over space in proportion to that channel's activation. Channels with
/// zero spatial sum contribute nothing.
pub fn fam<T: Scalar>(
    c: &FeatureMap3D<T>,
    latent: &LatentVector<T>,
    weights: &Matrix<T>,
    class: usize,
) -> Result<ActivationMap<T>> {
    check_head(c, weights, class)?;
    if latent.len() != c.depth() {
        return Err(Error::dim("latent vs feature channels", c.depth(), latent.len()));
    }
    let cells = c.height() * c.width();
    let channel_sums: Vec<T> = (0..c.depth())
        .map(|d| T::sum_iter((0..cells).map(|p| c.get(p / c.width(), p % c.width(), d))))
        .collect();
    let scale: Vec<T> = (0..c.depth())
        .map(|d| {
            if channel_sums[d] == T::zero() {
                T::zero()
            } else {
                latent.as_slice()[d] * weights.get(d, class) / channel_sums[d]
            }
        })
        .collect();
    let values = (0..cells)
        .map(|p| {
            let cell = c.cell(p / c.width(), p % c.width());
            T::sum_iter(cell.iter().zip(&scale).map(|(a, s)| *a * *s))
        })
        .collect();
    ActivationMap::new(values, c.height(), c.width())
}

/// I.i.d. uniform `[0, 1)` map, reproducible per seed.
pub fn random_map<T: Scalar>(shape: (usize, usize), seed: u64) -> ActivationMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..shape.0 * shape.1).map(|_| T::of(rng.random::<f64>())).collect();
    ActivationMap::new(values, shape.0, shape.1).expect("random map shape is non-empty")
}

/// Cells picked by greedy non-maximum suppression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopCells {
    pub cells: Vec<SpatialCell>,
    /// Fewer than the requested number of cells survived suppression.
    pub shortfall: bool,
}

/// Greedy descending-saliency selection; each pick suppresses every cell
/// within Chebyshev distance `radius`. Ties resolve in row-major order.
pub fn top_cells<T: Scalar>(map: &ActivationMap<T>, k: usize, radius: usize) -> Result<TopCells> {
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    let w = map.width();
    let mut order: Vec<usize> = (0..map.values().len()).collect();
    order.sort_by(|a, b| map.values()[*b].partial_cmp(&map.values()[*a]).unwrap().then(a.cmp(b)));
    let mut suppressed = vec![false; order.len()];
    let mut cells = Vec::with_capacity(k);
    for p in order {
        if cells.len() == k {
            break;
        }
        if suppressed[p] {
            continue;
        }
        let (r, c) = (p / w, p % w);
        cells.push(SpatialCell::new(r, c));
        for rr in r.saturating_sub(radius)..=(r + radius).min(map.height() - 1) {
            for cc in c.saturating_sub(radius)..=(c + radius).min(w - 1) {
                suppressed[rr * w + cc] = true;
            }
        }
    }
    let shortfall = cells.len() < k;
    Ok(TopCells { cells, shortfall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyBasis {
    /// Original-class logit with every other segment occluded.
    PredictedLogit,
    /// Coefficient of a local linear surrogate.
    LimeWeight,
}

/// One importance score per segment label.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelSaliency {
    pub scores: Vec<f32>,
    pub basis: SaliencyBasis,
    /// The surrogate fit needed a larger ridge penalty than configured.
    pub regularization_fallback: bool,
}

impl SuperpixelSaliency {
    /// Labels by descending score; ties go to the lower label.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|a, b| self.scores[*b].total_cmp(&self.scores[*a]).then(a.cmp(b)));
        order
    }
}

fn check_class(bundle: &ModelBundle, class: usize) -> Result<()> {
    if class >= bundle.n_classes() {
        return Err(Error::Bounds(format!("class {class} >= {}", bundle.n_classes())));
    }
    Ok(())
}

/// Scores each segment by the `class` logit of the image with every other
/// segment occluded.
pub fn superpixel_logit_saliency(
    bundle: &ModelBundle,
    image: &ImageTensor,
    seg: &Segmentation,
    class: usize,
) -> Result<SuperpixelSaliency> {
    check_class(bundle, class)?;
    let fill = bundle.occlusion_fill();
    let inputs = (0..seg.n_segments())
        .map(|s| occlude_except(image, seg, &[s], fill))
        .collect::<Result<Vec<_>>>()?;
    let scores = bundle.forward_batch(&inputs)?.iter().map(|p| p.logit(class)).collect();
    Ok(SuperpixelSaliency {
        scores,
        basis: SaliencyBasis::PredictedLogit,
        regularization_fallback: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimeConfig {
    pub n_samples: usize,
    pub ridge: f64,
    pub kernel_width: f64,
    pub inclusion_probability: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            n_samples: 1000,
            ridge: 1.0,
            kernel_width: 0.25,
            inclusion_probability: 0.5,
        }
    }
}

const LIME_BATCH: usize = 64;

/// Draws binary segment masks; the first sample keeps every segment.
fn lime_masks(n_segments: usize, config: &LimeConfig, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = vec![vec![true; n_segments]];
    for _ in 1..config.n_samples {
        masks.push((0..n_segments).map(|_| rng.random::<f64>() < config.inclusion_probability).collect());
    }
    masks
}

/// Exponential kernel on cosine distance to the all-visible mask.
fn lime_weight(mask: &[bool], width: f64) -> f64 {
    let on = mask.iter().filter(|b| **b).count();
    let distance = if on == 0 {
        1.0
    } else {
        1.0 - (on as f64 / mask.len() as f64).sqrt()
    };
    (-(distance * distance) / (width * width)).exp().sqrt()
}

/// Weighted ridge regression with an unpenalized intercept. Returns the
/// coefficients and whether the penalty had to be raised.
pub(crate) fn weighted_ridge(
    rows: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    ridge: f64,
) -> Result<(Vec<f64>, bool)> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let wsum: f64 = weights.iter().sum();
    if n == 0 || p == 0 || !(wsum > 0.0) {
        return Err(Error::Parameter("surrogate fit needs samples with positive weight".into()));
    }
    let mean_x: Vec<f64> = (0..p)
        .map(|j| rows.iter().zip(weights).map(|(r, w)| r[j] * w).sum::<f64>() / wsum)
        .collect();
    let mean_y = targets.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for ((row, y), w) in rows.iter().zip(targets).zip(weights) {
        let xc: Vec<f64> = row.iter().zip(&mean_x).map(|(a, m)| a - m).collect();
        for a in 0..p {
            rhs[a] += w * xc[a] * (y - mean_y);
            for b in 0..p {
                gram[(a, b)] += w * xc[a] * xc[b];
            }
        }
    }
    let mut penalty = ridge.max(0.0);
    let mut fallback = false;
    for _ in 0..12 {
        let mut system = gram.clone();
        for a in 0..p {
            system[(a, a)] += penalty;
        }
        if let Some(chol) = system.cholesky() {
            let diag = chol.l_dirty().diagonal();
            let well_posed = diag.min() > diag.max() * 1e-7;
            let beta = chol.solve(&rhs);
            if well_posed && beta.iter().all(|v| v.is_finite()) {
                return Ok((beta.iter().copied().collect(), fallback));
            }
        }
        fallback = true;
        penalty = if penalty > 0.0 { penalty * 10.0 } else { 1e-6 };
    }
    Err(Error::Parameter("surrogate regression stayed singular".into()))
}

/// Local linear surrogate over random segment masks; scores are the surrogate
/// coefficients for `class`.
pub fn lime_saliency(
    bundle: &ModelBundle,
    image: &ImageTensor,
    seg: &Segmentation,
    class: usize,
    config: &LimeConfig,
    seed: u64,
) -> Result<SuperpixelSaliency> {
    check_class(bundle, class)?;
    let s = seg.n_segments();
    if config.n_samples < s {
        return Err(Error::Parameter(format!(
            "{} LIME samples for {s} segments",
            config.n_samples
        )));
    }
    let masks = lime_masks(s, config, seed);
    let fill = bundle.occlusion_fill();
    let mut targets = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(LIME_BATCH) {
        let inputs = chunk
            .iter()
            .map(|m| {
                let keep: Vec<usize> = (0..s).filter(|l| m[*l]).collect();
                occlude_except(image, seg, &keep, fill)
            })
            .collect::<Result<Vec<_>>>()?;
        targets.extend(bundle.forward_batch(&inputs)?.iter().map(|p| p.logit(class) as f64));
    }
    let rows: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect())
        .collect();
    let weights: Vec<f64> = masks.iter().map(|m| lime_weight(m, config.kernel_width)).collect();
    let (beta, fallback) = weighted_ridge(&rows, &targets, &weights, config.ridge)?;
    Ok(SuperpixelSaliency {
        scores: beta.iter().map(|v| *v as f32).collect(),
        basis: SaliencyBasis::LimeWeight,
        regularization_fallback: fallback,
    })
}
