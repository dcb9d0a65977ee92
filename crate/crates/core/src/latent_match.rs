//! Region matching in the convolutional feature space of neighbour images.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use lru::LruCache;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBundle, Prediction};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{l2_unchecked, upsample_cell_to_box};
use crate::index::{LatentIndex, NeighborPool, DEFAULT_POOL};
use crate::record::{ConfigSnapshot, ExplanationMethod, ExplanationRecord, FeatureRecord, Timings};
use crate::saliency::{top_cells, MapKind, SaliencyMethod};
use crate::scalar::Scalar;
use crate::threshold::RelativeThreshold;
use crate::types::{ActivationMap, FeatureMap3D, ImageTensor, PixelBox, SpatialCell};

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_K_FEATURES: usize = 3;
pub const DEFAULT_NMS_RADIUS: usize = 1;
pub const DEFAULT_CONV_CACHE: usize = 256;

/// A selected test cell and its depth vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRegion<T> {
    pub cell: SpatialCell,
    pub omega: Vec<T>,
    pub saliency: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRegions<T> {
    pub regions: Vec<TestRegion<T>>,
    /// The map was constant, so the choice is arbitrary (row-major first).
    pub ambiguous: bool,
    pub shortfall: bool,
}

/// Picks up to `k` salient cells by non-maximum suppression and pairs each
/// with `C[i,j,:]`.
pub fn select_test_region<T: Scalar>(
    c: &FeatureMap3D<T>,
    m: &ActivationMap<T>,
    k: usize,
    radius: usize,
) -> Result<TestRegions<T>> {
    if m.shape() != c.spatial_shape() {
        return Err(Error::Bounds(format!(
            "activation map {:?} does not match feature map {:?}",
            m.shape(),
            c.spatial_shape()
        )));
    }
    let picked = top_cells(m, k, radius)?;
    let regions = picked
        .cells
        .iter()
        .map(|cell| TestRegion {
            cell: *cell,
            omega: c.cell(cell.row, cell.col).to_vec(),
            saliency: m.get(cell.row, cell.col),
        })
        .collect();
    Ok(TestRegions {
        regions,
        ambiguous: m.max() == m.min(),
        shortfall: picked.shortfall,
    })
}

/// Winner of the constrained cell search. `neighbor` indexes the candidate list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMatch<T> {
    pub neighbor: usize,
    pub cell: SpatialCell,
    pub distance: T,
    pub saliency: T,
}

/// Among cells of every candidate whose saliency passes `alpha` relative to
/// that candidate's own map maximum, returns the one whose depth vector is
/// closest to `omega`. Ties go to the lower candidate, then row-major order.
pub fn constrained_cell_argmin<T: Scalar>(
    omega: &[T],
    candidates: &[(&FeatureMap3D<T>, &ActivationMap<T>)],
    alpha: RelativeThreshold,
) -> Result<CellMatch<T>> {
    for (c, m) in candidates {
        if c.depth() != omega.len() {
            return Err(Error::dim("neighbour feature depth", omega.len(), c.depth()));
        }
        if m.shape() != c.spatial_shape() {
            return Err(Error::Bounds("neighbour map does not match its feature map".into()));
        }
    }
    let best: Vec<Option<CellMatch<T>>> = candidates
        .par_iter()
        .enumerate()
        .map(|(n, (c, m))| best_cell(n, omega, c, m, alpha))
        .collect();
    best.into_iter()
        .flatten()
        .reduce(|a, b| if b.distance < a.distance { b } else { a })
        .ok_or_else(|| {
            Error::NoMatch(format!(
                "no neighbour cell has saliency {} in a pool of {}",
                constraint_text(alpha, "alpha"),
                candidates.len()
            ))
        })
}

fn best_cell<T: Scalar>(
    n: usize,
    omega: &[T],
    c: &FeatureMap3D<T>,
    m: &ActivationMap<T>,
    alpha: RelativeThreshold,
) -> Option<CellMatch<T>> {
    let max = m.max();
    let mut best: Option<CellMatch<T>> = None;
    for i in 0..m.height() {
        for j in 0..m.width() {
            let s = m.get(i, j);
            if !alpha.admits(s, max) {
                continue;
            }
            let d = l2_unchecked(omega, c.cell(i, j));
            if best.is_none_or(|b| d < b.distance) {
                best = Some(CellMatch {
                    neighbor: n,
                    cell: SpatialCell::new(i, j),
                    distance: d,
                    saliency: s,
                });
            }
        }
    }
    best
}

pub(crate) fn constraint_text(t: RelativeThreshold, name: &str) -> String {
    match t {
        RelativeThreshold::Infinite => "> 0".to_string(),
        RelativeThreshold::Finite(v) if v == 1.0 => "equal to its map maximum".to_string(),
        RelativeThreshold::Finite(v) => format!("> max / {name} ({name} = {v})"),
    }
}

/// In-memory LRU of neighbour forward passes keyed by index row.
pub struct ConvCache {
    inner: Mutex<LruCache<usize, Arc<Prediction>>>,
}

impl ConvCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity >= 1");
        ConvCache {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        row: usize,
        compute: impl FnOnce() -> Result<Prediction>,
    ) -> Result<Arc<Prediction>> {
        if let Some(hit) = self.inner.lock().expect("cache lock").get(&row) {
            return Ok(hit.clone());
        }
        let value = Arc::new(compute()?);
        self.inner.lock().expect("cache lock").put(row, value.clone());
        Ok(value)
    }
}

impl Default for ConvCache {
    fn default() -> Self {
        ConvCache::new(DEFAULT_CONV_CACHE)
    }
}

impl std::fmt::Debug for ConvCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvCache").field("len", &self.len()).finish()
    }
}

/// What a region match points at in the neighbour image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedRegion {
    Cell(SpatialCell),
    Segment(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMatch {
    pub neighbor_row: usize,
    /// Position within the neighbour pool.
    pub pool_rank: usize,
    pub image_path: String,
    pub neighbor_label: usize,
    pub neighbor_class: usize,
    pub region: MatchedRegion,
    pub distance: f32,
    pub neighbor_saliency: f32,
    pub test_box: PixelBox,
    pub neighbor_box: PixelBox,
}

#[derive(Debug, Clone)]
pub struct LatentMatchQuery {
    pub omega_test: Vec<f32>,
    pub test_cell: SpatialCell,
    pub alpha: RelativeThreshold,
    pub pool: NeighborPool,
    pub method: MapKind,
    pub seed: u64,
}

/// Neighbour forward pass, through the cache when one is given.
fn neighbor_prediction(
    bundle: &ModelBundle,
    path: &str,
    row: usize,
    cache: Option<&ConvCache>,
) -> Result<Arc<Prediction>> {
    let compute = || bundle.load_image(path).and_then(|img| bundle.forward(&img));
    match cache {
        Some(c) => c.get_or_compute(row, compute),
        None => compute().map(Arc::new),
    }
}

/// Activation map of a neighbour for its own predicted class.
fn neighbor_map(bundle: &ModelBundle, pred: &Prediction, kind: MapKind, seed: u64) -> Result<ActivationMap<f32>> {
    SaliencyMethod {
        kind,
        target_class: pred.predicted_class,
        seed,
    }
    .map(pred, bundle.weights())
}

/// Scans every neighbour's feature map for the closest admissible cell.
pub fn match_latent(query: &LatentMatchQuery, bundle: &ModelBundle, cache: Option<&ConvCache>) -> Result<RegionMatch> {
    if query.pool.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let alpha = query.alpha.validate()?;
    let preds: Vec<Arc<Prediction>> = query
        .pool
        .entries
        .par_iter()
        .map(|nb| neighbor_prediction(bundle, &nb.image_path, nb.row_id, cache))
        .collect::<Result<_>>()?;
    let maps: Vec<ActivationMap<f32>> = preds
        .iter()
        .zip(&query.pool.entries)
        .map(|(p, nb)| neighbor_map(bundle, p, query.method, neighbor_seed(query.seed, nb.row_id)))
        .collect::<Result<_>>()?;
    let convs: Vec<&FeatureMap3D<f32>> = preds
        .iter()
        .map(|p| {
            p.conv_features
                .as_ref()
                .ok_or_else(|| Error::Contract("latent matching needs `conv_features`".into()))
        })
        .collect::<Result<_>>()?;
    let candidates: Vec<_> = convs.iter().copied().zip(maps.iter()).collect();
    let found = constrained_cell_argmin(&query.omega_test, &candidates, alpha)?;

    let nb = &query.pool.entries[found.neighbor];
    let shape = convs[found.neighbor].spatial_shape();
    let input = bundle.input_size();
    Ok(RegionMatch {
        neighbor_row: nb.row_id,
        pool_rank: found.neighbor,
        image_path: nb.image_path.clone(),
        neighbor_label: nb.label,
        neighbor_class: preds[found.neighbor].predicted_class,
        region: MatchedRegion::Cell(found.cell),
        distance: found.distance,
        neighbor_saliency: found.saliency,
        test_box: upsample_cell_to_box(query.test_cell, shape, input)?,
        neighbor_box: upsample_cell_to_box(found.cell, shape, input)?,
    })
}

/// Per-neighbour seed for random maps so each image gets its own draw.
pub(crate) fn neighbor_seed(seed: u64, row: usize) -> u64 {
    seed ^ (row as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub alpha: RelativeThreshold,
    pub pool: usize,
    pub k_features: usize,
    pub method: MapKind,
    pub nms_radius: usize,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            alpha: RelativeThreshold::Finite(DEFAULT_ALPHA),
            pool: DEFAULT_POOL,
            k_features: DEFAULT_K_FEATURES,
            method: MapKind::Cam,
            nms_radius: DEFAULT_NMS_RADIUS,
            seed: 0,
        }
    }
}

/// Full latent-space explanation of one image.
pub fn explain_latent(
    bundle: &ModelBundle,
    index: &LatentIndex,
    image: &ImageTensor,
    config: &LatentConfig,
    cache: Option<&ConvCache>,
) -> Result<ExplanationRecord> {
    if !bundle.is_convolutional() {
        return Err(Error::Contract("latent explanations need a convolutional backbone".into()));
    }
    if config.pool == 0 {
        return Err(Error::Parameter("pool size must be >= 1".into()));
    }
    let alpha = config.alpha.validate()?;
    let mut timings = Timings::default();
    let mut warnings = Vec::new();

    let t = Instant::now();
    let pred = bundle.forward(image).stage("forward")?;
    timings.record("forward", t);

    let t = Instant::now();
    let map = SaliencyMethod {
        kind: config.method,
        target_class: pred.predicted_class,
        seed: config.seed,
    }
    .map(&pred, bundle.weights())
    .stage("saliency")?;
    let conv = pred.conv_features.as_ref().expect("checked by forward");
    let regions = select_test_region(conv, &map, config.k_features, config.nms_radius).stage("saliency")?;
    if regions.ambiguous {
        warnings.push("activation map is constant; test cells chosen in row-major order".to_string());
    }
    if regions.shortfall {
        warnings.push(format!(
            "only {} of {} requested features survived suppression",
            regions.regions.len(),
            config.k_features
        ));
    }
    timings.record("saliency", t);

    let t = Instant::now();
    let pool = index.query(pred.latent.as_slice(), config.pool).stage("retrieval")?;
    timings.record("retrieval", t);

    let t = Instant::now();
    let mut features = Vec::new();
    for (rank, region) in regions.regions.iter().enumerate() {
        let query = LatentMatchQuery {
            omega_test: region.omega.clone(),
            test_cell: region.cell,
            alpha,
            pool: pool.clone(),
            method: config.method,
            seed: config.seed,
        };
        match match_latent(&query, bundle, cache) {
            Ok(m) => features.push(FeatureRecord::from_match(rank + 1, &m, region.saliency, Some(region.cell), None)),
            Err(Error::NoMatch(why)) => warnings.push(format!("feature {}: {why}", rank + 1)),
            Err(e) => return Err(e.at("matching")),
        }
    }
    timings.record("matching", t);
    if features.is_empty() {
        return Err(Error::NoMatch(format!(
            "no admissible neighbour cell for any test feature (alpha {})",
            alpha
        )));
    }

    Ok(ExplanationRecord::new(
        image.source_path(),
        pred.predicted_class,
        bundle.class_names()[pred.predicted_class].clone(),
        ExplanationMethod::Latent,
        ConfigSnapshot {
            alpha: Some(alpha),
            beta: None,
            pool: config.pool,
            k_features: config.k_features,
            segments: None,
            saliency: config.method.to_string(),
            seed: config.seed,
            neighbor_class: "neighbor_predicted".into(),
        },
        features,
        timings,
        warnings,
    ))
}
