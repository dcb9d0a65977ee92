//! Inclusion/occlusion faithfulness runs and masked training-set generation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBundle, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{upsample_cell_to_box, upsample_map_bilinear};
use crate::index::{LatentIndex, RecordMeta};
use crate::latent_match::neighbor_seed;
use crate::saliency::{lime_saliency, superpixel_logit_saliency, LimeConfig, MapKind, SaliencyMethod};
use crate::scalar::Scalar;
use crate::stats::mean_and_se;
use crate::superpixel_match::segment_image;
use crate::superpixels::{slic, SlicParams};
use crate::threshold::RelativeThreshold;
use crate::types::{ActivationMap, ImageTensor};

/// Pixel mask (row-major) of the `target_area` most salient pixels; ties go to
/// the earlier pixel in row-major order.
pub fn equal_area_region<T: Scalar>(m_pixel: &ActivationMap<T>, target_area: usize) -> Result<Vec<bool>> {
    let n = m_pixel.values().len();
    if target_area > n {
        return Err(Error::Bounds(format!("target area {target_area} exceeds {n} pixels")));
    }
    let v = m_pixel.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| v[*b].partial_cmp(&v[*a]).expect("finite map").then(a.cmp(b)));
    let mut mask = vec![false; n];
    for &p in &order[..target_area] {
        mask[p] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMethod {
    Cam,
    Fam,
    Random,
    SuperpixelLogit,
    Lime,
}

impl AblationMethod {
    pub fn name(self) -> &'static str {
        match self {
            AblationMethod::Cam => "cam",
            AblationMethod::Fam => "fam",
            AblationMethod::Random => "random",
            AblationMethod::SuperpixelLogit => "superpixel_logit",
            AblationMethod::Lime => "lime",
        }
    }

    fn map_kind(self) -> Option<MapKind> {
        match self {
            AblationMethod::Cam => Some(MapKind::Cam),
            AblationMethod::Fam => Some(MapKind::Fam),
            AblationMethod::Random => Some(MapKind::Random),
            _ => None,
        }
    }
}

impl std::str::FromStr for AblationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cam" => AblationMethod::Cam,
            "fam" => AblationMethod::Fam,
            "random" => AblationMethod::Random,
            "superpixel_logit" | "logit" => AblationMethod::SuperpixelLogit,
            "lime" => AblationMethod::Lime,
            other => return Err(Error::Parameter(format!("unknown ablation method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Keep the region, occlude the rest.
    Include,
    /// Occlude the region, keep the rest.
    Occlude,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Include => "include",
            AblationMode::Occlude => "occlude",
        }
    }
}

/// Pixels to fill for a region under `mode`; a `true` entry is occluded.
pub fn occlusion_mask(region: &[bool], mode: AblationMode) -> Vec<bool> {
    match mode {
        AblationMode::Include => region.iter().map(|r| !r).collect(),
        AblationMode::Occlude => region.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub methods: Vec<AblationMethod>,
    pub segment_counts: Vec<usize>,
    pub mode: AblationMode,
    pub n_images: usize,
    pub seed: u64,
    pub lime: LimeConfig,
}

impl AblationConfig {
    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.segment_counts.is_empty() {
            return Err(Error::Parameter("methods and segment_counts must be non-empty".into()));
        }
        if self.n_images == 0 {
            return Err(Error::Parameter("n_images must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub method: AblationMethod,
    pub segment_count: usize,
    pub mode: AblationMode,
    pub image_id: usize,
    /// Logit of the class predicted for the unmasked image.
    pub logit: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: AblationMethod,
    pub segment_count: usize,
    pub mode: AblationMode,
    pub n: usize,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationResult {
    pub records: Vec<AblationRecord>,
    /// Images that could not be processed, with the reason.
    pub failures: Vec<(usize, String)>,
}

impl AblationResult {
    /// Mean and standard error per (method, segment count, mode).
    pub fn aggregates(&self) -> Vec<CurvePoint> {
        let mut groups: BTreeMap<(AblationMethod, usize, AblationMode), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry((r.method, r.segment_count, r.mode))
                .or_default()
                .push(r.logit as f64);
        }
        groups
            .into_iter()
            .map(|((method, segment_count, mode), v)| {
                let (mean, std_error) = mean_and_se(&v);
                CurvePoint {
                    method,
                    segment_count,
                    mode,
                    n: v.len(),
                    mean,
                    std_error,
                }
            })
            .collect()
    }

    /// Logits of one curve point, in image order.
    pub fn logits(&self, method: AblationMethod, segment_count: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.segment_count == segment_count)
            .map(|r| r.logit as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,segment_count,mode,image_id,logit\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method.name(),
                r.segment_count,
                r.mode.name(),
                r.image_id,
                r.logit
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,segment_count,mode,n,mean,std_error\n");
        for p in self.aggregates() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.method.name(),
                p.segment_count,
                p.mode.name(),
                p.n,
                p.mean,
                p.std_error
            ));
        }
        out
    }
}

/// Salient region of one image for one method as a pixel mask. Map-based
/// methods take `area` pixels of the bilinearly upsampled map.
fn method_region(
    bundle: &ModelBundle,
    image: &ImageTensor,
    pred: &Prediction,
    method: AblationMethod,
    params: SlicParams,
    seed: u64,
    lime: &LimeConfig,
) -> Result<Vec<bool>> {
    let seg = slic(image, params)?;
    let class = pred.predicted_class;
    let logit = superpixel_logit_saliency(bundle, image, &seg, class)?;
    let top_logit = logit.ranking()[0];
    match method {
        AblationMethod::SuperpixelLogit => seg.mask_of(&[top_logit]),
        AblationMethod::Lime => {
            let sal = lime_saliency(bundle, image, &seg, class, lime, seed)?;
            seg.mask_of(&[sal.ranking()[0]])
        }
        _ => {
            let kind = method.map_kind().expect("map-based method");
            let area = seg.sizes()[top_logit];
            let map = SaliencyMethod {
                kind,
                target_class: class,
                seed,
            }
            .map(pred, bundle.weights())?;
            let pixel = upsample_map_bilinear(&map, bundle.input_size())?;
            equal_area_region(&pixel, area)
        }
    }
}

/// Original-class logit after masking `region` under `mode`.
pub fn masked_logit(
    bundle: &ModelBundle,
    image: &ImageTensor,
    region: &[bool],
    mode: AblationMode,
    class: usize,
) -> Result<f32> {
    let masked = image.masked(&occlusion_mask(region, mode), bundle.occlusion_fill())?;
    Ok(bundle.forward(&masked)?.logit(class))
}

fn ablate_image(
    bundle: &ModelBundle,
    meta: &RecordMeta,
    image_id: usize,
    config: &AblationConfig,
) -> Result<Vec<AblationRecord>> {
    let image = bundle.load_image(&meta.image_path)?;
    let pred = bundle.forward(&image)?;
    let mut out = Vec::new();
    for &segments in &config.segment_counts {
        let params = SlicParams::with_segments(segments);
        for &method in &config.methods {
            let seed = neighbor_seed(config.seed, image_id);
            let region = method_region(bundle, &image, &pred, method, params, seed, &config.lime)?;
            let logit = masked_logit(bundle, &image, &region, config.mode, pred.predicted_class)?;
            out.push(AblationRecord {
                method,
                segment_count: segments,
                mode: config.mode,
                image_id,
                logit,
            });
        }
    }
    Ok(out)
}

/// Runs the protocol over the first `n_images` dataset entries in parallel.
/// Failed images are logged and left out of the records.
pub fn run_ablation(bundle: &ModelBundle, dataset: &[RecordMeta], config: &AblationConfig) -> Result<AblationResult> {
    config.validate()?;
    let needs_maps = config.methods.iter().any(|m| m.map_kind().is_some());
    if needs_maps && !bundle.is_convolutional() {
        return Err(Error::Contract("map-based ablation methods need `conv_features`".into()));
    }
    let take = config.n_images.min(dataset.len());
    let per_image: Vec<Result<Vec<AblationRecord>>> = dataset[..take]
        .par_iter()
        .enumerate()
        .map(|(id, meta)| ablate_image(bundle, meta, id, config))
        .collect();
    let mut result = AblationResult::default();
    for (id, r) in per_image.into_iter().enumerate() {
        match r {
            Ok(records) => result.records.extend(records),
            Err(e) => {
                warn!("ablation skipped image {id} ({}): {e}", dataset[id].image_path);
                result.failures.push((id, e.to_string()));
            }
        }
    }
    Ok(result)
}

/// Which regions of each training image get masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    /// Cells of the image's own activation map.
    Latent(MapKind),
    /// Superpixels scored by occlude-rest logit.
    Superpixel { segments: usize },
    /// Every pixel.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedEntry {
    pub image_path: String,
    pub masked_path: String,
    pub occluded_fraction: f64,
    pub threshold: RelativeThreshold,
    pub label: usize,
}

pub const MASKED_MANIFEST: &str = "manifest.json";

/// Pixel mask of the regions of `image` admitted by `threshold`.
pub fn admitted_mask(
    bundle: &ModelBundle,
    image: &ImageTensor,
    method: MaskMethod,
    threshold: RelativeThreshold,
    seed: u64,
) -> Result<Vec<bool>> {
    let (h, w) = bundle.input_size();
    match method {
        MaskMethod::Full => Ok(vec![true; h * w]),
        MaskMethod::Latent(kind) => {
            let pred = bundle.forward(image)?;
            let map = SaliencyMethod {
                kind,
                target_class: pred.predicted_class,
                seed,
            }
            .map(&pred, bundle.weights())?;
            let max = map.max();
            let mut mask = vec![false; h * w];
            for i in 0..map.height() {
                for j in 0..map.width() {
                    if threshold.admits(map.get(i, j), max) {
                        let b = upsample_cell_to_box(crate::types::SpatialCell::new(i, j), map.shape(), (h, w))?;
                        for r in b.top..b.bottom {
                            mask[r * w + b.left..r * w + b.right].fill(true);
                        }
                    }
                }
            }
            Ok(mask)
        }
        MaskMethod::Superpixel { segments } => {
            let s = segment_image(bundle, image, SlicParams::with_segments(segments))?;
            let max = s.features.iter().map(|f| f.saliency).fold(f32::NEG_INFINITY, f32::max);
            let keep: Vec<usize> = s
                .features
                .iter()
                .filter(|f| threshold.admits(f.saliency, max))
                .map(|f| f.label)
                .collect();
            s.segmentation.mask_of(&keep)
        }
    }
}

/// Writes every indexed training image with its admitted salient regions
/// occluded, plus `manifest.json`. On an I/O failure everything written so far
/// is removed.
pub fn generate_masked_dataset(
    bundle: &ModelBundle,
    index: &LatentIndex,
    method: MaskMethod,
    threshold: RelativeThreshold,
    out_dir: impl AsRef<Path>,
    seed: u64,
) -> Result<Vec<MaskedEntry>> {
    let out_dir = out_dir.as_ref();
    let threshold = threshold.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let outcome = write_masked(bundle, index, method, threshold, out_dir, seed, &mut written);
    if outcome.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
    }
    outcome
}

fn write_masked(
    bundle: &ModelBundle,
    index: &LatentIndex,
    method: MaskMethod,
    threshold: RelativeThreshold,
    out_dir: &Path,
    seed: u64,
    written: &mut Vec<PathBuf>,
) -> Result<Vec<MaskedEntry>> {
    let masks: Vec<Result<(ImageTensor, Vec<bool>)>> = index
        .records()
        .par_iter()
        .enumerate()
        .map(|(row, meta)| {
            let image = bundle.load_image(&meta.image_path)?;
            let mask = admitted_mask(bundle, &image, method, threshold, neighbor_seed(seed, row))?;
            Ok((image, mask))
        })
        .collect();
    let mut entries = Vec::with_capacity(masks.len());
    for (row, (meta, res)) in index.records().iter().zip(masks).enumerate() {
        let (image, mask) = res?;
        let masked = image.masked(&mask, bundle.occlusion_fill())?;
        let stem = Path::new(&meta.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let path = out_dir.join(format!("{row:06}_{stem}.png"));
        bundle
            .to_dynamic(&masked)
            .save(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
        written.push(path.clone());
        let occluded = mask.iter().filter(|m| **m).count();
        entries.push(MaskedEntry {
            image_path: meta.image_path.clone(),
            masked_path: path.to_string_lossy().into_owned(),
            occluded_fraction: occluded as f64 / mask.len() as f64,
            threshold,
            label: meta.label,
        });
    }
    let manifest = out_dir.join(MASKED_MANIFEST);
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    written.push(manifest.clone());
    f.write_all(serde_json::to_string_pretty(&entries)?.as_bytes())
        .map_err(|e| Error::io(&manifest, e))?;
    if !entries.is_empty() {
        let mean = entries.iter().map(|e| e.occluded_fraction).sum::<f64>() / entries.len() as f64;
        info!("masked {} images, mean occluded fraction {mean:.3}", entries.len());
    }
    Ok(entries)
}
