//! Region matching over superpixels, using only latents and logits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ModelBundle;
use crate::error::{Error, Result, StageExt};
use crate::geometry::l2_unchecked;
use crate::index::{LatentIndex, NeighborPool, DEFAULT_POOL};
use crate::latent_match::{constraint_text, MatchedRegion, RegionMatch, DEFAULT_K_FEATURES};
use crate::record::{ConfigSnapshot, ExplanationMethod, ExplanationRecord, FeatureRecord, Timings};
use crate::saliency::{lime_saliency, LimeConfig};
use crate::scalar::Scalar;
use crate::superpixels::{crop_upsample_region, occlude_except, slic, Segmentation, SlicParams, DEFAULT_SEGMENTS};
use crate::threshold::RelativeThreshold;
use crate::types::{ImageTensor, PixelBox};

/// Environment variable naming the on-disk feature cache directory.
pub const CACHE_DIR_ENV: &str = "XEXPLAIN_CACHE_DIR";
const SEGMENT_MAGIC: &[u8; 4] = b"XSEG";
const SEGMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelFeature {
    pub label: usize,
    /// Latent of the segment cropped and rescaled to the model input.
    pub latent: Vec<f32>,
    /// Logit of the image's predicted class with every other segment occluded.
    pub saliency: f32,
    pub bbox: PixelBox,
    pub area: usize,
    /// Single-pixel segment; never matched.
    pub degenerate: bool,
}

/// A segmented image with per-segment features.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedImage {
    pub predicted_class: usize,
    pub segmentation: Segmentation,
    pub features: Vec<SuperpixelFeature>,
}

/// Featurizes each segment against the unoccluded prediction.
pub fn featurize_segments(bundle: &ModelBundle, image: &ImageTensor, seg: &Segmentation) -> Result<Vec<SuperpixelFeature>> {
    let class = bundle.forward(image)?.predicted_class;
    featurize_for_class(bundle, image, seg, class)
}

pub(crate) fn featurize_for_class(
    bundle: &ModelBundle,
    image: &ImageTensor,
    seg: &Segmentation,
    class: usize,
) -> Result<Vec<SuperpixelFeature>> {
    let fill = bundle.occlusion_fill();
    let target = bundle.input_size();
    let crops = (0..seg.n_segments())
        .map(|s| crop_upsample_region(image, seg, s, target, fill))
        .collect::<Result<Vec<_>>>()?;
    let crop_images: Vec<ImageTensor> = crops.iter().map(|c| c.image.clone()).collect();
    let latents = bundle.forward_batch(&crop_images)?;
    let occluded = (0..seg.n_segments())
        .map(|s| occlude_except(image, seg, &[s], fill))
        .collect::<Result<Vec<_>>>()?;
    let logits = bundle.forward_batch(&occluded)?;
    let sizes = seg.sizes();
    (0..seg.n_segments())
        .map(|s| {
            Ok(SuperpixelFeature {
                label: s,
                latent: latents[s].latent.as_slice().to_vec(),
                saliency: logits[s].logit(class),
                bbox: seg.bounding_box(s)?,
                area: sizes[s],
                degenerate: crops[s].degenerate,
            })
        })
        .collect()
}

/// Segments and featurizes an image under its own predicted class.
pub fn segment_image(bundle: &ModelBundle, image: &ImageTensor, params: SlicParams) -> Result<SegmentedImage> {
    let class = bundle.forward(image)?.predicted_class;
    let segmentation = slic(image, params)?;
    let features = featurize_for_class(bundle, image, &segmentation, class)?;
    Ok(SegmentedImage {
        predicted_class: class,
        segmentation,
        features,
    })
}

/// Candidate segments of one neighbour for the constrained search.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet<T> {
    pub latents: Vec<Vec<T>>,
    pub saliency: Vec<T>,
    /// Segments that may be returned; the map maximum still spans all segments.
    pub eligible: Vec<bool>,
}

impl SegmentSet<f32> {
    pub fn from_features(features: &[SuperpixelFeature]) -> Self {
        SegmentSet {
            latents: features.iter().map(|f| f.latent.clone()).collect(),
            saliency: features.iter().map(|f| f.saliency).collect(),
            eligible: features.iter().map(|f| !f.degenerate).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMatch<T> {
    pub neighbor: usize,
    pub segment: usize,
    pub distance: T,
    pub saliency: T,
}

/// Among eligible segments whose saliency passes `beta` relative to their own
/// image's maximum, returns the latent closest to `omega`. Ties go to the
/// lower candidate, then the lower segment label.
pub fn constrained_segment_argmin<T: Scalar>(
    omega: &[T],
    candidates: &[SegmentSet<T>],
    beta: RelativeThreshold,
) -> Result<SegmentMatch<T>> {
    for set in candidates {
        if set.latents.len() != set.saliency.len() || set.eligible.len() != set.saliency.len() {
            return Err(Error::InvalidValue("segment set columns differ in length".into()));
        }
        if let Some(bad) = set.latents.iter().find(|l| l.len() != omega.len()) {
            return Err(Error::dim("segment latent", omega.len(), bad.len()));
        }
    }
    let best: Vec<Option<SegmentMatch<T>>> = candidates
        .par_iter()
        .enumerate()
        .map(|(n, set)| {
            let max = set
                .saliency
                .iter()
                .copied()
                .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))?;
            let mut best: Option<SegmentMatch<T>> = None;
            for (s, latent) in set.latents.iter().enumerate() {
                if !set.eligible[s] || !beta.admits(set.saliency[s], max) {
                    continue;
                }
                let d = l2_unchecked(omega, latent);
                if best.is_none_or(|b| d < b.distance) {
                    best = Some(SegmentMatch {
                        neighbor: n,
                        segment: s,
                        distance: d,
                        saliency: set.saliency[s],
                    });
                }
            }
            best
        })
        .collect();
    best.into_iter()
        .flatten()
        .reduce(|a, b| if b.distance < a.distance { b } else { a })
        .ok_or_else(|| {
            Error::NoMatch(format!(
                "no neighbour segment has saliency {} in a pool of {}",
                constraint_text(beta, "beta"),
                candidates.len()
            ))
        })
}

#[derive(Debug, Clone)]
pub struct SuperpixelMatchQuery {
    pub omega_test: Vec<f32>,
    pub test_box: PixelBox,
    pub beta: RelativeThreshold,
    pub pool: NeighborPool,
}

/// Matches against pre-featurized neighbours, one per pool entry.
pub fn match_superpixel(query: &SuperpixelMatchQuery, pool_segmentations: &[SegmentedImage]) -> Result<RegionMatch> {
    if query.pool.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if pool_segmentations.len() != query.pool.len() {
        return Err(Error::dim("neighbour segmentations", query.pool.len(), pool_segmentations.len()));
    }
    let beta = query.beta.validate()?;
    let sets: Vec<SegmentSet<f32>> = pool_segmentations
        .iter()
        .map(|s| SegmentSet::from_features(&s.features))
        .collect();
    let found = constrained_segment_argmin(&query.omega_test, &sets, beta)?;
    let nb = &query.pool.entries[found.neighbor];
    let winner = &pool_segmentations[found.neighbor];
    Ok(RegionMatch {
        neighbor_row: nb.row_id,
        pool_rank: found.neighbor,
        image_path: nb.image_path.clone(),
        neighbor_label: nb.label,
        neighbor_class: winner.predicted_class,
        region: MatchedRegion::Segment(found.segment),
        distance: found.distance,
        neighbor_saliency: found.saliency,
        test_box: query.test_box,
        neighbor_box: winner.features[found.segment].bbox,
    })
}

/// On-disk store of featurized segmentations keyed by image content, model and
/// segmentation parameters.
#[derive(Debug, Clone)]
pub struct SegmentCache {
    dir: PathBuf,
}

impl SegmentCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SegmentCache { dir })
    }

    /// Uses `XEXPLAIN_CACHE_DIR` when set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(bundle: &ModelBundle, image: &ImageTensor, params: &SlicParams) -> String {
        let mut h = Sha256::new();
        h.update(b"segments-v1");
        let (c, ih, iw) = image.shape();
        for v in [c, ih, iw] {
            h.update((v as u64).to_le_bytes());
        }
        for v in image.pixels() {
            h.update(v.to_le_bytes());
        }
        for v in bundle.weights().data().iter().chain(bundle.bias()) {
            h.update(v.to_le_bytes());
        }
        h.update((params.requested_segments as u64).to_le_bytes());
        h.update(params.compactness.to_le_bytes());
        h.update((params.iterations as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.xseg"))
    }

    pub fn get(&self, key: &str, params: SlicParams) -> Option<SegmentedImage> {
        let path = self.path_for(key);
        let bytes = fs::read(&path).ok()?;
        match decode_segments(&bytes, params) {
            Ok(v) => Some(v),
            Err(reason) => {
                warn!("ignoring unreadable cache entry {}: {reason}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, value: &SegmentedImage) -> Result<()> {
        let path = self.path_for(key);
        let tmp = self.dir.join(format!("{key}.{}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&encode_segments(value)).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Layout: magic, u32 version, u64 count, u32 dim, u32 class, u32 height,
/// u32 width, then `count` rows of `dim` latent floats plus one saliency
/// float, `count` degenerate flags, and `height*width` u32 labels. All
/// little-endian.
fn encode_segments(v: &SegmentedImage) -> Vec<u8> {
    let dim = v.features.first().map_or(0, |f| f.latent.len());
    let seg = &v.segmentation;
    let mut out = Vec::new();
    out.extend_from_slice(SEGMENT_MAGIC);
    out.extend_from_slice(&SEGMENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.features.len() as u64).to_le_bytes());
    for x in [dim, v.predicted_class, seg.height(), seg.width()] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for f in &v.features {
        for x in f.latent.iter().chain(std::iter::once(&f.saliency)) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend(v.features.iter().map(|f| f.degenerate as u8));
    for l in seg.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn decode_segments(bytes: &[u8], params: SlicParams) -> std::result::Result<SegmentedImage, String> {
    let mut at = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(at..at + n).ok_or_else(|| format!("truncated at byte {at}"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != SEGMENT_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    if u32_at(take(4)?) != SEGMENT_VERSION as usize {
        return Err("unsupported version".into());
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let dim = u32_at(take(4)?);
    let class = u32_at(take(4)?);
    let h = u32_at(take(4)?);
    let w = u32_at(take(4)?);
    let rows = take(count * (dim + 1) * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect::<Vec<_>>();
    let degenerate = take(count)?.to_vec();
    let labels: Vec<u32> = take(h * w * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let segmentation = Segmentation::from_labels(&labels, h, w, params).map_err(|e| e.to_string())?;
    if segmentation.n_segments() != count {
        return Err("segment count disagrees with label map".into());
    }
    let sizes = segmentation.sizes();
    let features = (0..count)
        .map(|s| {
            let row = &rows[s * (dim + 1)..(s + 1) * (dim + 1)];
            Ok(SuperpixelFeature {
                label: s,
                latent: row[..dim].to_vec(),
                saliency: row[dim],
                bbox: segmentation.bounding_box(s).map_err(|e| e.to_string())?,
                area: sizes[s],
                degenerate: degenerate[s] != 0,
            })
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok(SegmentedImage {
        predicted_class: class,
        segmentation,
        features,
    })
}

/// Loads and featurizes one neighbour, consulting the cache when given.
pub fn neighbor_segments(
    bundle: &ModelBundle,
    path: &str,
    params: SlicParams,
    cache: Option<&SegmentCache>,
) -> Result<SegmentedImage> {
    let image = bundle.load_image(path)?;
    let Some(cache) = cache else {
        return segment_image(bundle, &image, params);
    };
    let key = SegmentCache::key(bundle, &image, &params);
    if let Some(hit) = cache.get(&key, params) {
        return Ok(hit);
    }
    let value = segment_image(bundle, &image, params)?;
    if let Err(e) = cache.put(&key, &value) {
        warn!("could not write segment cache: {e}");
    }
    Ok(value)
}

/// How test-image parts are ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestSaliency {
    Lime,
    Logit,
}

impl std::fmt::Display for TestSaliency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestSaliency::Lime => "lime",
            TestSaliency::Logit => "logit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelConfig {
    pub beta: RelativeThreshold,
    pub pool: usize,
    pub k_features: usize,
    pub segments: usize,
    pub test_saliency: TestSaliency,
    pub lime: LimeConfig,
    pub seed: u64,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        SuperpixelConfig {
            beta: RelativeThreshold::Infinite,
            pool: DEFAULT_POOL,
            k_features: DEFAULT_K_FEATURES,
            segments: DEFAULT_SEGMENTS,
            test_saliency: TestSaliency::Lime,
            lime: LimeConfig::default(),
            seed: 0,
        }
    }
}

/// Full superpixel explanation of one image.
pub fn explain_superpixel(
    bundle: &ModelBundle,
    index: &LatentIndex,
    image: &ImageTensor,
    config: &SuperpixelConfig,
    cache: Option<&SegmentCache>,
) -> Result<ExplanationRecord> {
    if config.pool == 0 || config.k_features == 0 {
        return Err(Error::Parameter("pool and k_features must be >= 1".into()));
    }
    let beta = config.beta.validate()?;
    let params = SlicParams::with_segments(config.segments);
    let mut timings = Timings::default();
    let mut warnings = Vec::new();

    let t = Instant::now();
    let pred = bundle.forward(image).stage("forward")?;
    timings.record("forward", t);

    let t = Instant::now();
    let seg = slic(image, params).stage("segmentation")?;
    timings.record("segmentation", t);

    let t = Instant::now();
    let test_features = featurize_for_class(bundle, image, &seg, pred.predicted_class).stage("featurize")?;
    timings.record("featurize", t);

    let t = Instant::now();
    let scores: Vec<f32> = match config.test_saliency {
        TestSaliency::Logit => test_features.iter().map(|f| f.saliency).collect(),
        TestSaliency::Lime => {
            let sal = lime_saliency(bundle, image, &seg, pred.predicted_class, &config.lime, config.seed)
                .stage("test-saliency")?;
            if sal.regularization_fallback {
                warnings.push("LIME fit needed a larger ridge penalty".to_string());
            }
            sal.scores
        }
    };
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|s| !test_features[*s].degenerate).collect();
    ranked.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    ranked.truncate(config.k_features);
    if ranked.len() < config.k_features {
        warnings.push(format!(
            "only {} usable segments for {} requested features",
            ranked.len(),
            config.k_features
        ));
    }
    timings.record("test-saliency", t);

    let t = Instant::now();
    let pool = index.query(pred.latent.as_slice(), config.pool).stage("retrieval")?;
    timings.record("retrieval", t);

    let t = Instant::now();
    let neighbors: Vec<SegmentedImage> = pool
        .entries
        .par_iter()
        .map(|nb| neighbor_segments(bundle, &nb.image_path, params, cache))
        .collect::<Result<_>>()
        .stage("neighbor-features")?;
    timings.record("neighbor-features", t);

    let t = Instant::now();
    let mut features = Vec::new();
    for (rank, &s) in ranked.iter().enumerate() {
        let query = SuperpixelMatchQuery {
            omega_test: test_features[s].latent.clone(),
            test_box: test_features[s].bbox,
            beta,
            pool: pool.clone(),
        };
        match match_superpixel(&query, &neighbors) {
            Ok(m) => features.push(FeatureRecord::from_match(rank + 1, &m, scores[s], None, Some(s))),
            Err(Error::NoMatch(why)) => warnings.push(format!("feature {}: {why}", rank + 1)),
            Err(e) => return Err(e.at("matching")),
        }
    }
    timings.record("matching", t);
    if features.is_empty() {
        return Err(Error::NoMatch(format!(
            "no admissible neighbour segment for any test feature (beta {beta})"
        )));
    }

    Ok(ExplanationRecord::new(
        image.source_path(),
        pred.predicted_class,
        bundle.class_names()[pred.predicted_class].clone(),
        ExplanationMethod::Superpixel,
        ConfigSnapshot {
            alpha: None,
            beta: Some(beta),
            pool: config.pool,
            k_features: config.k_features,
            segments: Some(config.segments),
            saliency: config.test_saliency.to_string(),
            seed: config.seed,
            neighbor_class: "neighbor_predicted".into(),
        },
        features,
        timings,
        warnings,
    ))
}
